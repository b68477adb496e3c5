// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised while reading or validating a weight file.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic bytes: expected \"ATGW\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("payload checksum mismatch: header says {expected:#010x}, payload hashes to {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("invalid config block: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up with the operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// The selected rule variant has no propagation rule for this primitive.
    #[error("rule variant {variant} has no rule for {op}")]
    UnsupportedRule { variant: &'static str, op: &'static str },
    /// Invalid caller input (out-of-range ids, bad configuration, ...).
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    /// Malformed JSON document (case, graph, report).
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
