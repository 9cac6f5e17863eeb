//! Library error type.
//!
//! Boundary operations (file I/O, parsing, config validation, training
//! orchestration) return [`Error`]. Contract violations inside the numeric
//! substrate (shape mismatches, non-scalar losses) are programmer errors and
//! panic with a message instead, mirroring the convention of dense-array
//! libraries.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at {field}: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged at step {step}: non-finite {component} loss")]
    Diverged { step: usize, component: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
