use std::path::PathBuf;

use thiserror::Error;

use crate::lora::LoraError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    /// Bad argument or precondition violated by the caller.
    #[error("{0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    /// An input file could not be read.
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// An output could not be written.
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("incompatible artifacts: {0}")]
    Compat(String),
    #[error("check failed: {0}")]
    Check(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn read(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Read {
            path: path.into(),
            source,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 check failure, 2 input error, 3 I/O error,
    /// 4 compatibility error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Check(_) => 1,
            Error::Io { .. } => 3,
            Error::Compat(_) => 4,
            Error::Read { .. }
            | Error::Tensor(_)
            | Error::Lora(_)
            | Error::Invalid(_)
            | Error::Config(_)
            | Error::Format { .. } => 2,
        }
    }
}
