use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GateError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("task `{0}` is already registered")]
    DuplicateTask(String),

    #[error("invalid task id `{0}`: use ASCII letters, digits, `_` or `-`")]
    InvalidTaskId(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{0} requires at least {1} inputs")]
    Empty(&'static str, usize),

    #[error("training failed: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch for parameter `{0}`")]
    Checksum(String),

    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GateError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GateError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 2 configuration, 3 data,
    /// 4 training, 5 I/O and checkpoint files.
    pub fn exit_code(&self) -> i32 {
        match self {
            GateError::Config(_)
            | GateError::UnknownTask(_)
            | GateError::DuplicateTask(_)
            | GateError::InvalidTaskId(_)
            | GateError::KindMismatch { .. } => 2,
            GateError::Data(_)
            | GateError::Csv(_)
            | GateError::Empty(..)
            | GateError::ShapeMismatch { .. }
            | GateError::Undefined(_) => 3,
            GateError::Training(_) | GateError::NonFinite(_) | GateError::NotScalar(_) | GateError::MissingGradient(_) => 4,
            GateError::Io { .. } | GateError::Checkpoint(_) | GateError::Checksum(_) | GateError::Json(_) => 5,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        GateError::ShapeMismatch {
            op,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
