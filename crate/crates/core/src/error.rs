use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate batch: batch norm needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("label {label} out of range for {classes} classes (sample {index})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("illegal cut: {0}")]
    Cut(String),

    #[error("no iterations accumulated for unit {0}")]
    EmptyEpoch(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("cache i/o error at {path:?}: {msg}")]
    CacheIo { path: PathBuf, msg: String },

    #[error("corrupt cache record {index}: {msg}")]
    CorruptRecord { index: usize, msg: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Training {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn cache_io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::CacheIo {
            path: path.into(),
            msg: err.to_string(),
        }
    }
}
