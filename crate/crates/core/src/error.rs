use std::io;

use thiserror::Error;

use crate::transport::wire::WireError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value in input tensor at element {index}")]
    NonFinite { index: usize },

    #[error("invalid model graph: {0}")]
    InvalidGraph(String),

    #[error("invalid split point {0}: the cut does not cross exactly one tensor")]
    InvalidSplit(usize),

    #[error("unknown layer name '{name}'")]
    UnknownLayer { name: String },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("model hash mismatch: stored {stored:016x}, computed {computed:016x}")]
    HashMismatch { stored: u64, computed: u64 },

    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("index {index} out of range (count {count})")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("wire protocol error: {0}")]
    Wire(#[from] WireError),

    #[error("server replied with error {code}: {message}")]
    Remote { code: u8, message: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error(transparent)]
    Io(#[from] io::Error),
}
