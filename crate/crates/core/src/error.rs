use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the attack pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("objective must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("operation `{op}` does not support gradients")]
    Unsupported { op: &'static str },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("image dimensions {height}x{width} are not divisible by {multiple}; pad the input first")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },

    #[error("{path}: truncated tensor file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: malformed header: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("parameter set mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training aborted at step {step}: non-finite {what}")]
    TrainingDiverged { step: usize, what: &'static str },

    #[error("latency measurement already in progress")]
    Busy,

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
