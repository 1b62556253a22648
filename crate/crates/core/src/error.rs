use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the registration engine.
///
/// The CLI maps each class onto a stable exit code, so new variants should
/// be added with that mapping in mind.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for {key}: expected one of {{{choices}}}, found {found:?}")]
    Choice {
        key: String,
        choices: String,
        found: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unsupported feature in {path}: {field} = {value}")]
    Unsupported {
        path: PathBuf,
        field: String,
        value: String,
    },

    #[error("invalid input data: {0}")]
    InvalidData(String),

    #[error("sampling failure: {0}")]
    Sampling(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

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

    pub(crate) fn unsupported(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        value: impl Into<String>,
    ) -> Self {
        Error::Unsupported {
            path: path.into(),
            field: field.into(),
            value: value.into(),
        }
    }
}
