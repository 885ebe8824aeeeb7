use std::path::PathBuf;

use thiserror::Error;

use crate::format::FormatError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model spec: {0}")]
    Spec(String),
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("partition infeasible: no draw gave every domain at least {min_size} samples after {attempts} attempts")]
    Infeasible { min_size: usize, attempts: usize },
    #[error("no transferable samples: every teacher's filtered set is empty")]
    NoTransferableSamples,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for numeric failures, 2 for I/O and configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Tensor(TensorError::NonFinite { .. }) | Error::Numeric(_) | Error::NoTransferableSamples => 1,
            Error::Tensor(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
