// SPDX-License-Identifier: MIT OR Apache-2.0

use attrigraph_core::{Error, LoadError};
use serde::Serialize;

/// Failure class; selects the process exit code and HTTP status family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Input,
    Compute,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::Compute => 3,
            ErrorKind::Io => 4,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, Serialize)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Input, message: message.into() }
    }

    pub fn compute(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Compute, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Io, message: message.into() }
    }

    /// `{"error": {"kind": …, "message": …}}` on one line.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let kind = match &err {
            Error::Input(_) | Error::Parse(_) => ErrorKind::Input,
            Error::Load(LoadError::Io(_)) | Error::Io(_) => ErrorKind::Io,
            Error::Load(_) => ErrorKind::Input,
            Error::Shape(_) | Error::NonFinite(_) | Error::UnsupportedRule { .. } => ErrorKind::Compute,
        };
        Self { kind, message: err.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        Self::io(err.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        Self::input(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
