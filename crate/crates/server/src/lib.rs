//! Annotation study service.
//!
//! All state lives in a [`StudyStore`] rebuilt from the event journal at
//! startup. Mutations run one at a time under a single lock: the command is
//! decided against the current store, the resulting event is appended and
//! synced, and only then applied and acknowledged. That also serializes
//! requests per session. Reads take the same lock, so a report always sees a
//! consistent store.

pub mod error;
pub mod journal;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use softfer::study::{agreement_report, Ack, Decision, Next, SessionState, StudyDefinition, StudyStore};

pub use error::{ApiError, Envelope, ServerError};
use journal::Journal;

pub const DEFAULT_SNAPSHOT_EVERY: u64 = 500;
const BODY_LIMIT: usize = 64 * 1024 * 1024;
const IMAGE_EXTENSIONS: [(&str, &str); 5] = [
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("png", "image/png"),
    ("webp", "image/webp"),
    ("gif", "image/gif"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    /// Holds `events.jsonl` and `snapshot.json`.
    pub data_dir: PathBuf,
    /// Image files named `<image_id>.<ext>`.
    pub images_dir: Option<PathBuf>,
    /// Snapshot after this many new events; 0 disables snapshots.
    pub snapshot_every: u64,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> ServerConfig {
        ServerConfig {
            data_dir: data_dir.into(),
            images_dir: None,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        }
    }
}

struct Inner {
    store: StudyStore,
    journal: Journal,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    images_dir: Option<PathBuf>,
}

impl AppState {
    pub fn open(config: &ServerConfig) -> Result<AppState, ServerError> {
        let (journal, store) = Journal::open(&config.data_dir, config.snapshot_every)?;
        Ok(AppState {
            inner: Arc::new(Mutex::new(Inner { store, journal })),
            images_dir: config.images_dir.clone(),
        })
    }

    /// Clone of the current store.
    pub fn store(&self) -> StudyStore {
        self.lock().store.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        // A panic mid-command never leaves a half-applied event behind:
        // events are applied only after the append succeeded.
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Decides, persists and applies one command.
    fn execute<T>(
        &self,
        command: impl FnOnce(&StudyStore) -> Result<Decision<T>, ApiError>,
    ) -> Result<T, ApiError> {
        let mut inner = self.lock();
        match command(&inner.store)? {
            Decision::Noop(v) => Ok(v),
            Decision::Record(event, v) => {
                inner.journal.append(&event)?;
                inner.store.apply(&event)?;
                let Inner { store, journal } = &mut *inner;
                if let Err(e) = journal.maybe_snapshot(store) {
                    // The event is durable in the log; a missed snapshot
                    // only costs replay time.
                    log::warn!("snapshot failed: {e}");
                }
                Ok(v)
            }
        }
    }

    async fn execute_blocking<T: Send + 'static>(
        &self,
        command: impl FnOnce(&StudyStore) -> Result<Decision<T>, ApiError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || state.execute(command))
            .await
            .map_err(|e| {
                ApiError::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "internal",
                    format!("command task failed: {e}"),
                    json!({}),
                )
            })?
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/studies", post(create_study))
        .route("/v1/studies/{id}/sessions", post(start_session))
        .route("/v1/studies/{id}/report", get(report))
        .route("/v1/sessions/{id}", get(session_status))
        .route("/v1/sessions/{id}/next", get(next_question))
        .route("/v1/sessions/{id}/answers", post(submit_answer))
        .route("/v1/images/{id}", get(image))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StudyCreated {
    pub study_id: String,
    pub participants: usize,
    pub questions: usize,
}

async fn create_study(
    State(state): State<AppState>,
    body: Result<Json<StudyDefinition>, JsonRejection>,
) -> Result<(StatusCode, Json<StudyCreated>), ApiError> {
    let definition = json_body(body)?;
    let participants = definition.participants.len();
    let created = state
        .execute_blocking(move |store| {
            let (event, id) = store.create_study(definition)?;
            Ok(Decision::Record(event, id))
        })
        .await?;
    let questions = state.lock().store.study(&created)?.schedule.total();
    Ok((
        StatusCode::CREATED,
        Json(StudyCreated {
            study_id: created,
            participants,
            questions,
        }),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartSession {
    pub participant_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub study_id: String,
    pub participant_id: String,
    pub state: SessionState,
    pub answered: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualification: Option<softfer::study::Grade>,
}

fn session_info(store: &StudyStore, session_id: &str) -> Result<SessionInfo, ApiError> {
    let s = store.session(session_id)?;
    Ok(SessionInfo {
        session_id: s.session_id.clone(),
        study_id: s.study_id.clone(),
        participant_id: s.participant_id.clone(),
        state: s.state,
        answered: s.answers.len(),
        qualification: s.qualification,
    })
}

async fn start_session(
    State(state): State<AppState>,
    UrlPath(study_id): UrlPath<String>,
    body: Result<Json<StartSession>, JsonRejection>,
) -> Result<Json<SessionInfo>, ApiError> {
    let req = json_body(body)?;
    let session_id = state
        .execute_blocking(move |store| Ok(store.start_session(&study_id, &req.participant_id)?))
        .await?;
    Ok(Json(session_info(&state.lock().store, &session_id)?))
}

async fn session_status(
    State(state): State<AppState>,
    UrlPath(session_id): UrlPath<String>,
) -> Result<Json<SessionInfo>, ApiError> {
    Ok(Json(session_info(&state.lock().store, &session_id)?))
}

async fn next_question(
    State(state): State<AppState>,
    UrlPath(session_id): UrlPath<String>,
) -> Result<Json<Next>, ApiError> {
    Ok(Json(state.lock().store.next_question(&session_id)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitAnswer {
    pub question_id: String,
    pub choice: String,
}

async fn submit_answer(
    State(state): State<AppState>,
    UrlPath(session_id): UrlPath<String>,
    body: Result<Json<SubmitAnswer>, JsonRejection>,
) -> Result<Json<Ack>, ApiError> {
    let req = json_body(body)?;
    let timestamp = now_ms();
    let ack = state
        .execute_blocking(move |store| Ok(store.submit_answer(&session_id, &req.question_id, &req.choice, timestamp)?))
        .await?;
    Ok(Json(ack))
}

#[derive(Debug, Default, Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn report(
    State(state): State<AppState>,
    UrlPath(study_id): UrlPath<String>,
    query: Result<Query<ReportQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(query) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let report = agreement_report(&state.lock().store, &study_id)?;
    match query.format.as_deref() {
        None | Some("json") => Ok(Json(report).into_response()),
        Some("markdown") => Ok((
            [(header::CONTENT_TYPE, "text/markdown; charset=utf-8")],
            report.to_markdown(),
        )
            .into_response()),
        Some(other) => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            format!("unknown report format `{other}`"),
            json!({ "allowed": ["json", "markdown"] }),
        )),
    }
}

/// Image ids become file names, so only a conservative character set is
/// accepted.
fn safe_image_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn find_image(dir: &Path, id: &str) -> Option<(PathBuf, &'static str)> {
    IMAGE_EXTENSIONS.iter().find_map(|(ext, mime)| {
        let path = dir.join(format!("{id}.{ext}"));
        path.is_file().then_some((path, *mime))
    })
}

async fn image(State(state): State<AppState>, UrlPath(image_id): UrlPath<String>) -> Result<Response, ApiError> {
    let missing = || ApiError::not_found("unknown_image", format!("no image `{image_id}`"), json!({ "image_id": image_id }));
    if !safe_image_id(&image_id) {
        return Err(missing());
    }
    let dir = state.images_dir.as_deref().ok_or_else(missing)?;
    let (path, mime) = find_image(dir, &image_id).ok_or_else(missing)?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        log::error!("{}: {e}", path.display());
        missing()
    })?;
    Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response())
}

async fn not_found() -> ApiError {
    ApiError::not_found("not_found", "no such endpoint", json!({}))
}
