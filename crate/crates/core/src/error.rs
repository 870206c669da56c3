use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: corners must be finite with x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("layout infeasible: {0}")]
    Layout(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("version mismatch: expected {expected:?}, found {found:?}")]
    Version { expected: String, found: String },

    #[error("non-finite loss in term {term}")]
    NonFinite { term: &'static str },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
