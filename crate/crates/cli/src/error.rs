use std::path::PathBuf;

use thiserror::Error;

use synthamt::dataset::DatasetError;
use synthamt::inference::InferenceError;
use synthamt::renderer::RenderError;
use synthamt::sample_bank::BankError;
use synthamt::training::TrainError;
use synthamt_neural::NeuralError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    Missing { what: &'static str, path: PathBuf },
    #[error("{0} is required but was not given (flag or config)")]
    Required(&'static str),
    #[error("checkpoint {path} was written for a different model configuration (checkpoint: {found}; config: {expected})")]
    Version { path: PathBuf, found: String, expected: String },
    #[error("sample bank: {0}")]
    Bank(#[from] BankError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("{0}")]
    Evaluate(String),
    #[error("{failed} of {total} inputs failed")]
    Partial { failed: usize, total: usize },
    #[error("thread pool: {0}")]
    Threads(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
