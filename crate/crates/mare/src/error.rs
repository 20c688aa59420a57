use std::path::PathBuf;

use mare_core::data::DataError;
use mare_core::eval::EvalError;
use mare_core::model::ModelError;
use mare_core::training::TrainError;

/// Failures surfaced by the command-line tool, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or input data (exit status 2).
    #[error("{0}")]
    Invalid(String),
    /// Anything that went wrong while doing the work (exit status 1).
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Layout(_) => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyStream(_) | TrainError::EmptyData => {
                CliError::Invalid(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NoGold | EvalError::EmptyCorpus | EvalError::AspectCount { .. } | EvalError::TooFewSeeds { .. } => {
                CliError::Invalid(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}
