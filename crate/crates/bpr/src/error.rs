//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BprError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {message}")]
    TrainingAborted { step: u64, message: String },

    #[error("verification check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BprError>;

impl BprError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        BprError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
