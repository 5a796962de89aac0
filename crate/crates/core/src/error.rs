use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("degenerate batch in {op}: {count} element(s) per channel, need at least 2")]
    DegenerateBatch { op: &'static str, count: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called with a cache from an inference-mode forward pass")]
    InferenceCache,

    #[error("model file: {reason} at byte offset {offset}")]
    ModelFormat { offset: u64, reason: String },

    #[error("nifti header field `{field}`: {reason}")]
    Nifti { field: &'static str, reason: String },

    #[error("unsupported datatype {0}")]
    UnsupportedDatatype(i16),

    #[error("raw volume: {0}")]
    RawFormat(String),

    #[error("patch cache: {0}")]
    PatchCache(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
