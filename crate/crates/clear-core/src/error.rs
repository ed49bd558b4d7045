//! Crate-wide error type.

use thiserror::Error;

/// Whether a backend failure is worth retrying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendErrorKind {
    /// Transport failures, timeouts, non-2xx responses. Retryable.
    Transient,
    /// Malformed responses, unusable configuration. Not retryable.
    Permanent,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("decode error at line {line}: {reason}")]
    Decode { line: usize, reason: String },

    #[error("{} backend error after {attempts} attempt(s): {message}",
            match kind { BackendErrorKind::Transient => "transient", BackendErrorKind::Permanent => "permanent" })]
    Backend {
        kind: BackendErrorKind,
        attempts: u32,
        message: String,
    },

    #[error("environment error: {0}")]
    Env(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("reflection produced no guidance for task {task_id}")]
    ReflectionNoGuidance { task_id: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a transient backend error on the first attempt.
    pub fn transient(message: impl Into<String>) -> Self {
        Error::Backend {
            kind: BackendErrorKind::Transient,
            attempts: 1,
            message: message.into(),
        }
    }

    /// Shorthand for a permanent backend error on the first attempt.
    pub fn permanent(message: impl Into<String>) -> Self {
        Error::Backend {
            kind: BackendErrorKind::Permanent,
            attempts: 1,
            message: message.into(),
        }
    }

    /// True for failures the retry machinery is allowed to re-run.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            Error::Backend {
                kind: BackendErrorKind::Transient,
                ..
            }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
