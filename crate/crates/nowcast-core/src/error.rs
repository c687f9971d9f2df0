//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the nowcasting pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An on-disk artifact is malformed; the message names the offending field.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("numerical failure: loss became non-finite at {context}")]
    Diverged { context: String },

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
