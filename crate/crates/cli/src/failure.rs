use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use softfer::error::DataError;

pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Machine-readable error written to stderr as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Envelope {
    pub code: &'static str,
    pub message: String,
    pub context: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub exit_code: i32,
    pub envelope: Envelope,
}

impl Failure {
    fn new(exit_code: i32, code: &'static str, message: impl Into<String>, context: Value) -> Failure {
        Failure {
            exit_code,
            envelope: Envelope {
                code,
                message: message.into(),
                context,
            },
        }
    }

    pub fn usage(message: impl Into<String>, context: Value) -> Failure {
        Failure::new(EXIT_USAGE, "usage", message, context)
    }

    /// A flag value that parsed but is out of range.
    pub fn invalid_argument(flag: &str, message: impl Into<String>) -> Failure {
        Failure::new(EXIT_USAGE, "invalid_argument", message, json!({ "flag": flag }))
    }

    pub fn config(path: &Path, message: impl Into<String>) -> Failure {
        Failure::new(EXIT_USAGE, "config", message, json!({ "path": path }))
    }

    pub fn data(code: &'static str, message: impl Into<String>, context: Value) -> Failure {
        Failure::new(EXIT_DATA, code, message, context)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.envelope).expect("envelope serializes")
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Failure {
        let message = e.to_string();
        match e {
            DataError::Io { path, .. } => Failure::data("io", message, json!({ "path": path })),
            DataError::Parse { path, line, .. } => {
                Failure::data("parse", message, json!({ "path": path, "line": line }))
            }
            DataError::DuplicateId { path, image_id } => Failure::data(
                "duplicate_id",
                message,
                json!({ "path": path, "image_id": image_id }),
            ),
            DataError::Header { path, .. } => Failure::data("header", message, json!({ "path": path })),
            DataError::Incomplete { path, .. } => Failure::data("incomplete", message, json!({ "path": path })),
            DataError::Invalid(_) => Failure::data("invalid_data", message, json!({})),
        }
    }
}

impl From<softfer::Error> for Failure {
    fn from(e: softfer::Error) -> Failure {
        use softfer::Error::*;
        match e {
            Data(d) => d.into(),
            Model(m) => Failure::data("model", m.to_string(), json!({})),
            Sampling(s) => Failure::data("sampling", s.to_string(), json!({})),
            Scoring(s) => Failure::data("scoring", s.to_string(), json!({})),
            Loss(l) => Failure::data("loss", l.to_string(), json!({})),
            Metrics(m) => Failure::data("metrics", m.to_string(), json!({})),
            Study(s) => Failure::data("study", s.to_string(), json!({})),
        }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Failure {
                softfer::Error::from(e).into()
            }
        }
    )*};
}

via_core!(
    softfer::error::ModelError,
    softfer::error::SamplingError,
    softfer::error::ScoringError,
    softfer::error::MetricsError,
    softfer::error::StudyError
);

impl From<softfer_server::ServerError> for Failure {
    fn from(e: softfer_server::ServerError) -> Failure {
        Failure::data("server", e.to_string(), json!({}))
    }
}
