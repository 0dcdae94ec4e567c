use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("config error at line {line}, key `{key}`: {msg}")]
    Config { line: usize, key: String, msg: String },

    /// A violated invariant; `keys` lists the keys involved, comma separated.
    #[error("invalid config ({keys}): {msg}")]
    ConfigInvariant { keys: String, msg: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("image error in {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    #[error("unmatched files: {0:?}")]
    Unmatched(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
