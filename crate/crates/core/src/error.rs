use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocabulary size {size} cannot hold {required} required units (short by {deficit})")]
    VocabTooSmall {
        size: usize,
        required: usize,
        deficit: usize,
    },

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },

    #[error("sequence of length {len} exceeds max_len {max}")]
    OverLength { len: usize, max: usize },

    #[error("input contains no masked position")]
    NoMaskedPositions,

    #[error("{0} head is disabled in this configuration")]
    HeadDisabled(&'static str),

    #[error("distribution at position {position} sums to {sum}")]
    Unnormalized { position: usize, sum: f64 },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFinite(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("configuration mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for `Err(Error::InvalidArgument(..))`.
pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
