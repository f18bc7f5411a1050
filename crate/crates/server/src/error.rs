use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};
use softfer::error::StudyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Envelope {
    pub code: &'static str,
    pub message: String,
    pub context: Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub envelope: Envelope,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>, context: Value) -> ApiError {
        ApiError {
            status,
            envelope: Envelope {
                code,
                message: message.into(),
                context,
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message, json!({}))
    }

    pub fn not_found(code: &'static str, message: impl Into<String>, context: Value) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, code, message, context)
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> ApiError {
        use StudyError::*;
        let message = e.to_string();
        let (status, code, context) = match e {
            EmptyPool => (StatusCode::UNPROCESSABLE_ENTITY, "empty_pool", json!({})),
            TooFewParticipants { needed, have } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "too_few_participants",
                json!({ "needed": needed, "have": have }),
            ),
            InvalidDefinition(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_definition", json!({})),
            RepeatPoolExhausted(p) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "repeat_pool_exhausted",
                json!({ "participant_id": p }),
            ),
            UnknownStudy(id) => (StatusCode::NOT_FOUND, "unknown_study", json!({ "study_id": id })),
            UnknownSession(id) => (StatusCode::NOT_FOUND, "unknown_session", json!({ "session_id": id })),
            UnknownParticipant(id) => (
                StatusCode::NOT_FOUND,
                "unknown_participant",
                json!({ "participant_id": id }),
            ),
            OutOfOrder { question_id, pending } => (
                StatusCode::CONFLICT,
                "out_of_order",
                json!({ "question_id": question_id, "pending": pending }),
            ),
            InvalidChoice { kind, choice } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_choice",
                json!({ "kind": kind, "choice": choice }),
            ),
            ConflictingAnswer(q) => (
                StatusCode::CONFLICT,
                "conflicting_answer",
                json!({ "question_id": q }),
            ),
            SessionComplete(s) => (StatusCode::CONFLICT, "session_complete", json!({ "session_id": s })),
            Disqualified(s) => (StatusCode::FORBIDDEN, "disqualified", json!({ "session_id": s })),
            IncompleteQualification { answered, total } => (
                StatusCode::CONFLICT,
                "incomplete_qualification",
                json!({ "answered": answered, "total": total }),
            ),
        };
        ApiError::new(status, code, message, context)
    }
}

impl From<ServerError> for ApiError {
    fn from(e: ServerError) -> ApiError {
        log::error!("{e}");
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "storage_error",
            "the answer log could not be written",
            json!({}),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.envelope)).into_response()
    }
}
