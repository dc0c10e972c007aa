use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(String),
    #[error("softmax row {0} has no finite entries")]
    DegenerateRow(usize),
    #[error("target {index} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },
    #[error("cache holds {cached} tokens but step claims position {position}")]
    CachePosition { cached: usize, position: usize },
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
