//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("region error: {0}")]
    Region(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("point {index} maps to the horizon (third homogeneous coordinate ~ 0)")]
    Horizon { index: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {file}: {detail}")]
    Parse { file: String, detail: String },

    #[error("single-step reachability violated: {0}")]
    Assumption(String),

    #[error("annotation budget exhausted: {0}")]
    Exhausted(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FlowError {
    pub fn shape_mismatch(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        FlowError::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
