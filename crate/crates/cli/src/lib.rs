//! Experiment runner behind the `decbandit` binary: config loading with flag
//! overrides, result files and the `run`, `sweep` and `graph-info` commands.

pub mod commands;
pub mod config;
pub mod output;

use decbandit::agents::AgentError;
use decbandit::sim::{ConfigError, SimError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 2 for bad input, 3 for a breach detected while running, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Sim(SimError::Config(_)) => 2,
            CliError::Sim(SimError::Agent(AgentError::Config(_))) => 2,
            CliError::Sim(_) => 3,
            CliError::Io { .. } | CliError::Csv(_) | CliError::Json(_) => 1,
        }
    }
}
