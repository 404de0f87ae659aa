use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing calibration key `{0}`")]
    MissingCalib(String),

    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("weight bundle error: {0}")]
    Bundle(String),

    #[error("invalid value: {0}")]
    Invalid(String),
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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
