//! Experiment harness for the dsbn-core adaptation library: TOML configs,
//! run orchestration, JSON-lines metrics, CSV reports, dataset and embedding
//! export, and versioned binary checkpoints.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod pool;
pub mod report;
pub mod runner;

use std::fmt;

/// Error with a process exit code: 2 for configuration problems, 3 for
/// runtime failures.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn config(err: impl Into<anyhow::Error>) -> Self {
        CliError::Config(err.into())
    }

    pub fn runtime(err: impl Into<anyhow::Error>) -> Self {
        CliError::Runtime(err.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e:#}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;
