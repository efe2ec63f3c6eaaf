use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("operation on an empty tensor")]
    EmptyTensor,
    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(String),
    #[error("tensor is not recorded on an active tape")]
    DetachedTensor,
    #[error("tape was already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("spatial dimensions must be even, got {h}x{w}")]
    OddDimension { h: usize, w: usize },
    #[error("invalid resize target {h}x{w}")]
    BadTarget { h: usize, w: usize },
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    CheckpointStageMismatch { expected: String, found: String },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint does not fit model `{model}`: tensor `{tensor}` {detail}")]
    ShapeMismatchOnLoad {
        model: String,
        tensor: String,
        detail: String,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("image dimensions differ: {0}")]
    DimsDiffer(String),
    #[error("no matching image pairs found")]
    NoPairsFound,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::EmptyTensor => "EmptyTensor",
            Error::NotScalar(_) => "NotScalar",
            Error::DetachedTensor => "DetachedTensor",
            Error::TapeConsumed => "TapeConsumed",
            Error::OddDimension { .. } => "OddDimension",
            Error::BadTarget { .. } => "BadTarget",
            Error::BadDimensions(_) => "BadDimensions",
            Error::TooSmall(_) => "TooSmall",
            Error::MissingGrad(_) => "MissingGrad",
            Error::NonFiniteGrad(_) => "NonFiniteGrad",
            Error::Decode { .. } => "DecodeError",
            Error::MissingFile(_) => "MissingFile",
            Error::EmptyDataset => "EmptyDataset",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::CheckpointStageMismatch { .. } => "CheckpointStageMismatch",
            Error::BadMagic => "BadMagic",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::ShapeMismatchOnLoad { .. } => "ShapeMismatchOnLoad",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::DimsDiffer(_) => "DimsDiffer",
            Error::NoPairsFound => "NoPairsFound",
            Error::Config(_) => "Config",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
