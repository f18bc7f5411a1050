//! Soft-label facial expression recognition toolkit.
//!
//! Turns per-emotion binary classifier outputs into 8-element soft labels,
//! plans one-vs-rest negative sampling, partitions images by how confidently
//! their hard label is supported, and evaluates predictions.

pub mod au_loss;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod sampling;
pub mod scoring;
pub mod study;
pub mod subsets;
pub mod synth;

pub use error::Error;
pub use model::{Emotion, NUM_AUS, NUM_EMOTIONS};
pub use par::Execution;
pub use scoring::SoftLabel;
