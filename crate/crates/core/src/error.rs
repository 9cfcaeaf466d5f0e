//! Error types shared across the pipeline.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition or invariant was violated by caller-supplied data.
    #[error("validation error: {0}")]
    Validation(String),

    /// A referenced feature file could not be ingested for a specific sample.
    #[error("ingestion error for sample '{sample_id}': {message}")]
    Ingestion { sample_id: String, message: String },

    /// A structured text file (manifest, response, config) failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// Checkpoint serialization or fingerprint problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn ingestion(sample_id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            sample_id: sample_id.into(),
            message: message.into(),
        }
    }
}
