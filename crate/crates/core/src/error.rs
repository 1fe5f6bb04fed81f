use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index {index} out of range for {what} with {bound} entries")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("no gradients populated before optimizer step")]
    MissingGradients,

    #[error("loss became NaN or infinite for task `{task}` at epoch {epoch}")]
    NanLoss { task: String, epoch: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("missing input modality `{0}`")]
    MissingModality(String),

    #[error("task `{0}` not found")]
    UnknownTask(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Stable machine-readable code used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => "E_SHAPE",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::OutOfRange { .. } => "E_RANGE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::Config(_) => "E_CONFIG",
            Error::DuplicateParameter(_) => "E_PARAM",
            Error::MissingGradients => "E_GRAD",
            Error::NanLoss { .. } => "E_NAN_LOSS",
            Error::EmptySplit(_) => "E_SPLIT",
            Error::UndefinedCorrelation(_) => "E_UNDEFINED",
            Error::MissingModality(_) => "E_MODALITY",
            Error::UnknownTask(_) => "E_TASK",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}
