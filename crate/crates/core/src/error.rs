use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum LabError {
    /// A precondition on shapes or values was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A training or dynamics loop produced a non-finite or runaway value.
    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::InvalidArgument(msg.into()))
}
