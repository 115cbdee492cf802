use std::io;

/// Errors produced across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input could not be parsed. `context` names the offending record.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    /// Input parsed but violates a contract (unknown label, dangling id, bad config value).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Zero-norm or otherwise unusable vector.
    #[error("degenerate embedding: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A persisted artifact (index, checkpoint) is unreadable at a specific line or offset.
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    /// Embedding endpoint or generation backend failed.
    #[error("external service error: {0}")]
    External(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }
}
