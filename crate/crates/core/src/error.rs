use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input of length {len} exceeds the maximum sequence length {limit}")]
    InputTooLong { len: usize, limit: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("incompatible archive: {}", .0.join("; "))]
    Incompatible(Vec<String>),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite loss at step {step} (batch records: {})", .batch_ids.join(", "))]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("{path}:{line}: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("target sequence contains no non-padding tokens")]
    EmptyTarget,

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::LayoutMismatch(_)
            | Error::Incompatible(_)
            | Error::Unsupported(_) => 2,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => 4,
            Error::InputTooLong { .. }
            | Error::Validation { .. }
            | Error::Data(_)
            | Error::EmptyTarget
            | Error::Io { .. }
            | Error::Json(_) => 3,
        }
    }
}
