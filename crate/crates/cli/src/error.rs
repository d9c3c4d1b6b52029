use std::path::PathBuf;

use stgp_core::{QueryError, SensorError, SimError, SolverError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported schema version {found} (expected major {expected})")]
    Version { path: PathBuf, found: String, expected: u32 },
    #[error("solver did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("system is not positive definite: {0}")]
    NotPositiveDefinite(SolverError),
    #[error(transparent)]
    Solver(SolverError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Version { .. } | CliError::Query(_) => 2,
            CliError::Io { .. } => 3,
            CliError::NotConverged { .. } | CliError::Solver(_) => 4,
            CliError::NotPositiveDefinite(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SensorError> for CliError {
    fn from(e: SensorError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::NotPositiveDefinite { .. } => CliError::NotPositiveDefinite(e),
            e => CliError::Solver(e),
        }
    }
}
