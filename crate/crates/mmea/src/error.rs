use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmeaError {
    #[error("{path}: missing required file")]
    MissingFile { path: PathBuf },

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: reference to undeclared {kind} '{name}'")]
    DanglingRef {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        name: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),

    #[error("numerical abort at epoch {epoch} step {step}: {detail}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checksum mismatch in {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl MmeaError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> MmeaError {
        MmeaError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> MmeaError {
        MmeaError::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MmeaError>;
