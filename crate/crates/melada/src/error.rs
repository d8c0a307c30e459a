//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: node {a} has shape {a_shape:?}, node {b} has shape {b_shape:?}")]
    ShapeMismatch {
        op: &'static str,
        a: usize,
        a_shape: (usize, usize),
        b: usize,
        b_shape: (usize, usize),
    },

    #[error("tensor shape {shape:?} incompatible with {op}")]
    BadShape { op: &'static str, shape: (usize, usize) },

    #[error("non-finite value produced by node {id} ({op})")]
    NonFinite { id: usize, op: &'static str },

    #[error("node {id} is not a scalar loss (shape {shape:?})")]
    NonScalarLoss { id: usize, shape: (usize, usize) },

    #[error("gradient nodes unavailable: last backward pass was not recorded")]
    NotRecorded,

    #[error("no gradient reached node {id}")]
    NoGradient { id: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated or corrupt file: {0}")]
    Truncated(String),

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
