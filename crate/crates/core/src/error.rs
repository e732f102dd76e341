//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape or length mismatch between arrays/matrices.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid caller-provided data (out-of-range action, non-finite input).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite value produced where finiteness is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation invoked in the wrong state (missing cache, mid-task reset).
    #[error("state error: {0}")]
    State(String),

    /// Scheduler stepped past the total interaction budget.
    #[error("end of task sequence")]
    EndOfSequence,

    /// Malformed binary or text input file.
    #[error("format error: {0}")]
    Format(String),

    /// Truncated file or record-count mismatch.
    #[error("length error: {0}")]
    Length(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
