use std::path::PathBuf;

use thiserror::Error;

use crate::model::Emotion;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown emotion `{0}` (expected one of Neutral, Happy, Sad, Surprise, Fear, Disgust, Anger, Contempt)")]
    UnknownEmotion(String),
    #[error("AU{0} is not part of the 21-unit representation")]
    UnknownAu(u8),
    #[error("Neutral must have an empty AU set")]
    NeutralHasAus,
    #[error("invalid correlation matrix: {0}")]
    InvalidCorrelation(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("uniform fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("negative sample total must be non-negative, got {0}")]
    NegativeTotal(i64),
    #[error("insufficient pool: {}", format_shortfalls(.0))]
    InsufficientPool(Vec<Shortfall>),
}

/// How many images an emotion is missing when materializing a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shortfall {
    pub emotion: Emotion,
    pub requested: usize,
    pub available: usize,
}

fn format_shortfalls(items: &[Shortfall]) -> String {
    items
        .iter()
        .map(|s| {
            format!(
                "{} needs {} but only {} available (short by {})",
                s.emotion,
                s.requested,
                s.available,
                s.requested - s.available
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("zero denominator in {mode} confidence score: {term}")]
    ZeroDenominator { mode: &'static str, term: &'static str },
    #[error("expected {expected} values, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("value {value} out of range [0, 1] for {what}")]
    OutOfRange { what: String, value: f64 },
    #[error("image `{image_id}`: {message}")]
    Incomplete { image_id: String, message: String },
    #[error("confidence table has no entry for classifier `{0}`")]
    MissingClassifier(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("cannot evaluate an empty set of records")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: duplicate image_id `{image_id}`")]
    DuplicateId { path: PathBuf, image_id: String },
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {message}")]
    Incomplete { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StudyError {
    #[error("image pool is empty")]
    EmptyPool,
    #[error("study needs at least {needed} participants for circular repeats, has {have}")]
    TooFewParticipants { needed: usize, have: usize },
    #[error("invalid study definition: {0}")]
    InvalidDefinition(String),
    #[error("unknown study `{0}`")]
    UnknownStudy(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("participant `{0}` is not enrolled in this study")]
    UnknownParticipant(String),
    #[error("question `{question_id}` is not pending (pending: {pending})")]
    OutOfOrder { question_id: String, pending: String },
    #[error("choice `{choice}` is not valid for a {kind} question")]
    InvalidChoice { kind: &'static str, choice: String },
    #[error("question `{0}` was already answered with a different choice")]
    ConflictingAnswer(String),
    #[error("session `{0}` is complete")]
    SessionComplete(String),
    #[error("session `{0}` did not pass the qualification exam")]
    Disqualified(String),
    #[error("qualification exam incomplete: {answered} of {total} answered")]
    IncompleteQualification { answered: usize, total: usize },
    #[error("not enough unrepeated questions for participant `{0}` to place all repeats")]
    RepeatPoolExhausted(String),
}

/// Umbrella error for callers that drive several stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Study(#[from] StudyError),
}
