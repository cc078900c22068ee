//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed numeric or structural input to an operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation was called in a way its contract forbids
    /// (e.g. a loss that needs a hard label got none).
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad configuration file or inconsistent settings.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite loss surfaced during training; never clipped silently.
    #[error("numerical abort on scene {scene_id}: {detail}")]
    NumericAbort { scene_id: String, detail: String },

    /// A finite-difference probe produced a non-finite evaluation.
    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the CLI: 2 for configuration/input problems,
    /// 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericAbort { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
