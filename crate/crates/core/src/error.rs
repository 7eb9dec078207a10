//! Library error type shared by every module.

use std::path::PathBuf;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by dataset handling, encoders, training and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The object is not in a state that permits the requested operation.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Bounded retries were exhausted (e.g. anchor sampling under a margin).
    #[error("resource exhausted: {0}")]
    ResourceExhausted(String),

    /// Configuration text failed to parse or validate. Collects every
    /// violation found, not just the first.
    #[error("config error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// Training produced a non-finite loss; carries a diagnostics snapshot.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// Filesystem failure with the offending path.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A persisted artifact (cache, checkpoint, split, manifest) is malformed.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
