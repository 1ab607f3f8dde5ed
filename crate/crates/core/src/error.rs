use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("conflicting settings `{first}` and `{second}`: {message}")]
    Conflict {
        first: String,
        second: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("session of length {0} cannot be split into prefix, validation and test targets")]
    Split(usize),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("non-finite value in batch {batch}: {message}")]
    Numeric { batch: usize, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
