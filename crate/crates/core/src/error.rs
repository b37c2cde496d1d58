use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or batch does not have the shape an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An optimization produced a non-finite value.
    #[error("optimization diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Dataset files are missing or malformed.
    #[error("ingestion error in {file}: {detail}")]
    Ingestion { file: PathBuf, detail: String },

    /// A persisted artifact (checkpoint, archive, export) could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Experiment configuration failed validation.
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
