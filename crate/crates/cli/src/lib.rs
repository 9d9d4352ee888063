//! Experiment harness: configuration, the four subcommands and their output
//! files.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use thiserror::Error;

pub use commands::{cmd_calibrate, cmd_run, cmd_simulate, cmd_sweep};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] scout_core::Error),

    /// A run finished but one of its self-checks failed.
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}
