use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error(transparent)]
    Image(#[from] ImageError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

/// Failures reading or writing PNG images.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    Missing(PathBuf),

    #[error("{path}: expected 8-bit RGB, found {found}")]
    NotRgb { path: PathBuf, found: String },

    #[error("{path}: corrupt image stream: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{path}: cannot write image: {reason}")]
    Write { path: PathBuf, reason: String },

    #[error("{path}: shapes differ between rainy {rainy:?} and clean {clean:?}")]
    PairShape { path: PathBuf, rainy: Shape, clean: Shape },

    #[error("no image pairs found under {0}")]
    Empty(PathBuf),
}

/// Failures decoding a checkpoint or applying it to a model.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error("malformed checkpoint payload: {0}")]
    Malformed(String),

    #[error("parameter `{name}`: model expects {expected:?}, checkpoint has {found}")]
    ShapeMismatch {
        name: String,
        expected: Option<Shape>,
        found: String,
    },
}
