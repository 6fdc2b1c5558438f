use std::path::PathBuf;

use thiserror::Error;

/// Failures of a run, split by the exit code they map to.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Core(#[from] sparsegrad::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExperimentError::Io { path: path.into(), source }
    }

    /// Numeric failures as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ExperimentError::NonFiniteLoss { .. }
                | ExperimentError::Core(sparsegrad::Error::NotConverged { .. })
                | ExperimentError::Core(sparsegrad::Error::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;
