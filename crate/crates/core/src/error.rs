use std::path::PathBuf;
use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    BackwardConsumed,

    #[error("no gradients have been populated (run backward first)")]
    GradsMissing,
}

impl TensorError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid { op, msg: msg.into() }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch { op, detail: detail.into() }
    }
}

/// Errors raised by checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a TPDC checkpoint)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint does not match model: {0}")]
    Incompatible(String),

    #[error("checkpoint config hash {found:#018x} does not match expected {expected:#018x}")]
    ConfigHashMismatch { found: u64, expected: u64 },
}

/// Errors raised reading or writing dataset directories.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset file missing: {0}")]
    MissingFile(PathBuf),

    #[error("manifest config hash {found} does not match expected {expected}")]
    HashMismatch { found: String, expected: String },

    #[error("malformed manifest: {0}")]
    BadManifest(String),

    #[error("invalid generator config: {0}")]
    BadConfig(String),

    #[error("image decode failed for {path}: {msg}")]
    BadImage { path: PathBuf, msg: String },
}

/// Errors raised parsing or validating a run configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Msg(String),
}

impl Error {
    pub fn msg(m: impl Into<String>) -> Self {
        Error::Msg(m.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
