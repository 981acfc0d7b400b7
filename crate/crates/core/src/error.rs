use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid annotation {id:?}: {reason}")]
    InvalidAnnotation { id: String, reason: String },

    #[error(
        "batch norm running statistics are uninitialized; run at least one training step first"
    )]
    UninitializedStats,

    #[error("loss is not a scalar (dims {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite loss at step {step}; offending batch ids: {ids:?}")]
    Diverged { step: usize, ids: Vec<String> },

    #[error("fingerprint mismatch: index built with {expected}, checkpoint is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("malformed CTEN data: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

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
