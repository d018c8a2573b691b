use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("spherical harmonics degree mismatch: requested {requested}, stored {stored}")]
    ShDegree { requested: usize, stored: usize },

    #[error("unsupported spherical harmonics degree {0} (maximum is 3)")]
    UnsupportedShDegree(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing property `{0}`")]
    MissingProperty(String),

    #[error("invalid camera {id}: {reason}")]
    InvalidCamera { id: String, reason: String },

    #[error("size mismatch: expected {expected}, found {found}")]
    SizeMismatch { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient for kernel {index}")]
    NonFiniteGradient { index: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
