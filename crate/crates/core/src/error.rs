use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    DataAt { path: PathBuf, line: usize, message: String },
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: usize, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] kite_tensor::TensorError),
    #[error(transparent)]
    Smiles(#[from] kite_smiles::SmilesError),
}

impl CoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::Config(_) => ErrorClass::Config,
            CoreError::NonFinite { .. } => ErrorClass::Numeric,
            CoreError::Tensor(kite_tensor::TensorError::NonFinite(_)) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        CoreError::DataAt {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl From<kite_smiles::ParseError> for CoreError {
    fn from(e: kite_smiles::ParseError) -> Self {
        CoreError::Smiles(e.into())
    }
}
