use std::fs;
use std::path::Path;

use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use softfer::study::{PoolImage, QualificationConfig, QualificationItem, StudyDefinition};
use softfer::{Emotion, SoftLabel};
use softfer_server::{journal, AppState, ServerConfig};
use tempfile::tempdir;
use tokio::sync::oneshot;

struct Running {
    base: String,
    client: Client,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl Running {
    async fn start(config: ServerConfig) -> Running {
        let state = AppState::open(&config).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(async move {
            softfer_server::serve(listener, state, async {
                rx.await.ok();
            })
            .await
            .unwrap();
        });
        Running {
            base,
            client: Client::new(),
            stop: Some(tx),
            task,
        }
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.task.await.unwrap();
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn post(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn answer(&self, session: &str, question: &str, choice: &str) -> (StatusCode, Value) {
        self.post(
            &format!("/v1/sessions/{session}/answers"),
            &json!({ "question_id": question, "choice": choice }),
        )
        .await
    }
}

fn definition(images: usize, participants: usize, exam: usize) -> StudyDefinition {
    let pool = (0..images)
        .map(|i| {
            let mut v = [0.05; 8];
            v[i % 8] = 0.9;
            PoolImage {
                image_id: format!("img{i:03}"),
                soft_label: SoftLabel::new(v).unwrap(),
                hard_label: Emotion::ALL[i % 8],
                decoy: None,
            }
        })
        .collect();
    let mut def = StudyDefinition::new(pool, (0..participants).map(|p| format!("p{p}")).collect());
    def.qualification = QualificationConfig {
        n_images: exam,
        pass_threshold: 0.75,
        items: (0..exam)
            .map(|i| QualificationItem {
                image_id: format!("exam{i:02}"),
                reference: Emotion::ALL[i % 8],
            })
            .collect(),
    };
    def
}

/// Answers the exam correctly and returns the number of exam questions.
async fn pass_exam(app: &Running, session: &str) -> usize {
    let mut n = 0;
    loop {
        let (_, next) = app.get(&format!("/v1/sessions/{session}/next")).await;
        if next["kind"] != "qualification" {
            return n;
        }
        let i: usize = next["image_id"].as_str().unwrap()[4..].parse().unwrap();
        let (status, _) = app
            .answer(session, next["question_id"].as_str().unwrap(), Emotion::ALL[i % 8].name())
            .await;
        assert_eq!(status, StatusCode::OK);
        n += 1;
    }
}

async fn answer_n(app: &Running, session: &str, n: usize) {
    for _ in 0..n {
        let (_, next) = app.get(&format!("/v1/sessions/{session}/next")).await;
        if next["status"] == "done" {
            return;
        }
        let choice = next["choices"][0].as_str().unwrap().to_string();
        let (status, _) = app.answer(session, next["question_id"].as_str().unwrap(), &choice).await;
        assert_eq!(status, StatusCode::OK);
    }
}

fn answer_records(dir: &Path) -> usize {
    fs::read_to_string(dir.join(journal::LOG_FILE))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"answer_submitted\""))
        .count()
}

#[tokio::test]
async fn study_lifecycle() {
    let dir = tempdir().unwrap();
    let app = Running::start(ServerConfig::new(dir.path())).await;

    let (status, created) = app.post("/v1/studies", &serde_json::to_value(definition(12, 3, 4)).unwrap()).await;
    assert_eq!(status, StatusCode::CREATED);
    let study = created["study_id"].as_str().unwrap().to_string();
    assert_eq!(created["questions"], 24 + 7);

    let (status, s) = app
        .post(&format!("/v1/studies/{study}/sessions"), &json!({ "participant_id": "p0" }))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["state"], "qualifying");
    let session = s["session_id"].as_str().unwrap().to_string();
    // Starting again resumes the same session.
    let (_, again) = app
        .post(&format!("/v1/studies/{study}/sessions"), &json!({ "participant_id": "p0" }))
        .await;
    assert_eq!(again["session_id"], session.as_str());

    assert_eq!(pass_exam(&app, &session).await, 4);
    let (_, info) = app.get(&format!("/v1/sessions/{session}")).await;
    assert_eq!(info["state"], "active");
    assert_eq!(info["qualification"]["passed"], true);

    let (_, next) = app.get(&format!("/v1/sessions/{session}/next")).await;
    assert_eq!(next["status"], "question");
    for hidden in ["provenance", "origin", "decoy"] {
        assert!(next.get(hidden).is_none());
    }
    let q = next["question_id"].as_str().unwrap().to_string();
    let choices: Vec<String> = serde_json::from_value(next["choices"].clone()).unwrap();

    let (status, err) = app.answer(&session, &q, "maybe").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "invalid_choice");
    assert!(err["message"].is_string() && err["context"].is_object());

    let (status, ack) = app.answer(&session, &q, &choices[0]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["duplicate"], false);
    let (status, ack) = app.answer(&session, &q, &choices[0]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["duplicate"], true);
    let (status, err) = app.answer(&session, &q, &choices[1]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["code"], "conflicting_answer");
    assert_eq!(answer_records(dir.path()), 5);

    answer_n(&app, &session, 100).await;
    let (_, done) = app.get(&format!("/v1/sessions/{session}/next")).await;
    assert_eq!(done, json!({ "status": "done", "state": "complete" }));
    // A retried answer is still acknowledged once the session is complete.
    let (status, ack) = app.answer(&session, &q, &choices[0]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["duplicate"], true);
    let (status, err) = app.answer(&session, "q999999", "hard").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["code"], "session_complete");

    let (status, report) = app.get(&format!("/v1/studies/{study}/report")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["kind"], "agreement");
    assert!(report["exp1_answers"].as_u64().unwrap() > 0);

    let md = app
        .client
        .get(format!("{}/v1/studies/{study}/report?format=markdown", app.base))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    assert!(md.contains("Experiment 1") && md.contains("Pairwise agreement"));
    app.stop().await;
}

#[tokio::test]
async fn error_envelopes() {
    let dir = tempdir().unwrap();
    let app = Running::start(ServerConfig::new(dir.path())).await;

    let (status, err) = app.get("/v1/sessions/nope/next").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_session");
    assert_eq!(err["context"]["session_id"], "nope");

    let (status, err) = app.post("/v1/studies/nope/sessions", &json!({ "participant_id": "p0" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_study");

    let (status, err) = app.post("/v1/studies", &json!({ "pool": 3 })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "bad_request");

    let (status, err) = app.post("/v1/studies", &serde_json::to_value(definition(0, 3, 0)).unwrap()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "empty_pool");

    let (status, err) = app.post("/v1/studies", &serde_json::to_value(definition(4, 2, 0)).unwrap()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "too_few_participants");

    let (status, err) = app.get("/v2/anything").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "not_found");

    let (_, created) = app.post("/v1/studies", &serde_json::to_value(definition(4, 3, 0)).unwrap()).await;
    let study = created["study_id"].as_str().unwrap();
    let (status, err) = app
        .post(&format!("/v1/studies/{study}/sessions"), &json!({ "participant_id": "mallory" }))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_participant");

    let (_, s) = app
        .post(&format!("/v1/studies/{study}/sessions"), &json!({ "participant_id": "p1" }))
        .await;
    let session = s["session_id"].as_str().unwrap();
    let (status, err) = app.answer(session, "q999999", "hard").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["code"], "out_of_order");

    // Failed creations leave nothing in the log.
    assert_eq!(
        fs::read_to_string(dir.path().join(journal::LOG_FILE)).unwrap().lines().count(),
        2
    );
    app.stop().await;
}

#[tokio::test]
async fn restart_recovers_from_snapshot_and_log() {
    let dir = tempdir().unwrap();
    let mut config = ServerConfig::new(dir.path());
    config.snapshot_every = 4;

    let app = Running::start(config.clone()).await;
    let (_, created) = app.post("/v1/studies", &serde_json::to_value(definition(10, 3, 0)).unwrap()).await;
    let study = created["study_id"].as_str().unwrap().to_string();
    let mut sessions = Vec::new();
    for p in ["p0", "p1", "p2"] {
        let (_, s) = app
            .post(&format!("/v1/studies/{study}/sessions"), &json!({ "participant_id": p }))
            .await;
        sessions.push(s["session_id"].as_str().unwrap().to_string());
    }
    for s in &sessions {
        answer_n(&app, s, 5).await;
    }
    let (_, before) = app.get(&format!("/v1/studies/{study}/report")).await;
    let (_, next_before) = app.get(&format!("/v1/sessions/{}/next", sessions[1])).await;
    app.stop().await;
    assert!(dir.path().join(journal::SNAPSHOT_FILE).exists());

    let app = Running::start(config.clone()).await;
    let (_, after) = app.get(&format!("/v1/studies/{study}/report")).await;
    assert_eq!(before, after);
    let (_, next_after) = app.get(&format!("/v1/sessions/{}/next", sessions[1])).await;
    assert_eq!(next_before, next_after);
    // Resuming a participant returns their session; answering continues.
    let (_, s) = app
        .post(&format!("/v1/studies/{study}/sessions"), &json!({ "participant_id": "p1" }))
        .await;
    assert_eq!(s["session_id"], sessions[1].as_str());
    assert_eq!(s["answered"], 5);
    answer_n(&app, &sessions[1], 3).await;
    app.stop().await;

    // Without the snapshot the log alone rebuilds the same state.
    let with_snapshot = AppState::open(&config).unwrap().store();
    fs::remove_file(dir.path().join(journal::SNAPSHOT_FILE)).unwrap();
    let log_only = AppState::open(&config).unwrap().store();
    assert_eq!(with_snapshot, log_only);
    assert_eq!(log_only.session(&sessions[1]).unwrap().answers.len(), 8);
}

#[tokio::test]
async fn torn_final_record_is_dropped() {
    let dir = tempdir().unwrap();
    let config = ServerConfig::new(dir.path());
    let app = Running::start(config.clone()).await;
    app.post("/v1/studies", &serde_json::to_value(definition(4, 3, 0)).unwrap()).await;
    app.stop().await;

    let log = dir.path().join(journal::LOG_FILE);
    let intact = fs::read(&log).unwrap();
    let mut torn = intact.clone();
    torn.extend_from_slice(br#"{"event":"session_started","session_id":"sess"#);
    fs::write(&log, &torn).unwrap();
    let store = AppState::open(&config).unwrap().store();
    assert_eq!(store.studies.len(), 1);
    assert!(store.sessions.is_empty());
    assert_eq!(fs::read(&log).unwrap(), intact);

    // A malformed record in the middle is corruption, not a torn write.
    let mut bad = b"not json\n".to_vec();
    bad.extend_from_slice(&intact);
    fs::write(&log, &bad).unwrap();
    assert!(AppState::open(&config).is_err());
}

#[tokio::test]
async fn concurrent_duplicates_store_one_answer() {
    let dir = tempdir().unwrap();
    let app = Running::start(ServerConfig::new(dir.path())).await;
    let (_, created) = app.post("/v1/studies", &serde_json::to_value(definition(6, 3, 0)).unwrap()).await;
    let study = created["study_id"].as_str().unwrap();
    let (_, s) = app
        .post(&format!("/v1/studies/{study}/sessions"), &json!({ "participant_id": "p2" }))
        .await;
    let session = s["session_id"].as_str().unwrap().to_string();
    let (_, next) = app.get(&format!("/v1/sessions/{session}/next")).await;
    let q = next["question_id"].as_str().unwrap().to_string();
    let choice = next["choices"][0].as_str().unwrap().to_string();

    let url = format!("{}/v1/sessions/{session}/answers", app.base);
    let mut handles = Vec::new();
    for _ in 0..16 {
        let client = app.client.clone();
        let url = url.clone();
        let body = json!({ "question_id": q, "choice": choice });
        handles.push(tokio::spawn(async move {
            let r = client.post(url).json(&body).send().await.unwrap();
            assert_eq!(r.status(), StatusCode::OK);
            r.json::<Value>().await.unwrap()["duplicate"].as_bool().unwrap()
        }));
    }
    let mut fresh = 0;
    for h in handles {
        if !h.await.unwrap() {
            fresh += 1;
        }
    }
    assert_eq!(fresh, 1);
    assert_eq!(answer_records(dir.path()), 1);
    app.stop().await;
}

#[tokio::test]
async fn images_are_served_from_the_static_directory() {
    let dir = tempdir().unwrap();
    let images = tempdir().unwrap();
    fs::write(images.path().join("img001.png"), b"\x89PNG fake").unwrap();
    fs::write(dir.path().join("secret.png"), b"nope").unwrap();
    let mut config = ServerConfig::new(dir.path().join("data"));
    config.images_dir = Some(images.path().to_path_buf());
    let app = Running::start(config).await;

    let r = app.client.get(format!("{}/v1/images/img001", app.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "image/png");
    assert_eq!(r.bytes().await.unwrap().as_ref(), b"\x89PNG fake");

    let (status, err) = app.get("/v1/images/img404").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_image");
    let (status, _) = app.get("/v1/images/..%2Fsecret").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    app.stop().await;
}
