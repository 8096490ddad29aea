use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Dataset ingestion failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("{path}:{line}: malformed row: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: level {level} outside 1..=4")]
    LevelOutOfRange {
        path: PathBuf,
        line: usize,
        level: i64,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("corrupt image {path}: {msg}")]
    CorruptImage { path: PathBuf, msg: String },
    #[error("manifest is empty")]
    EmptyManifest,
}

/// Tensor-file (PTF) decoding failures.
#[derive(Debug, Error)]
pub enum CkptError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated payload: tensor `{name}` ends at byte {end}, payload has {len}")]
    TruncatedPayload { name: String, end: u64, len: u64 },
    #[error("overlapping tensors `{first}` and `{second}`")]
    Overlap { first: String, second: String },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("unsupported dtype `{dtype}` for `{name}`")]
    UnsupportedDtype { name: String, dtype: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("level {0} outside 1..=4")]
    Level(i64),
    #[error("attention was not captured in this trace")]
    NoAttention,
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("layer group {group} outside 0..={max}")]
    GroupOutOfRange { group: usize, max: usize },
    #[error("non-finite gradient for `{name}`")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("parameters do not match model: {0}")]
    NameMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CkptError),
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable single-word category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) | Error::MissingParam(_) | Error::NameMismatch(_) => "model",
            Error::Level(_) | Error::Data(_) => "data",
            Error::NoAttention => "attention",
            Error::StepOutOfRange { .. } | Error::GroupOutOfRange { .. } => "schedule",
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "format",
        }
    }
}
