//! Workspace error type. Variants map onto the process exit codes used by
//! the CLI: configuration problems exit 1, numeric/training failures exit 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Out-of-range index (modality, candidate position, flat offset).
    #[error("index error: {0}")]
    Index(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed dataset, checkpoint, or results file.
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged or aborted.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Data(_) => 1,
            _ => 2,
        }
    }
}
