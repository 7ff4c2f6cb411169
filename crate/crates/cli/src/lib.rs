//! Runs the simulator experiments and writes their results as CSV and JSON.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

pub use commands::{run, RunOptions};
pub use config::{ExperimentConfig, ExperimentKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] eopd_core::Error),
    /// The run failed after its partial results were written to `out`.
    #[error("{source} (partial results in {})", out.display())]
    Partial { source: eopd_core::Error, out: PathBuf },
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(eopd_core::Error::InvalidInput(_)) => 2,
            CliError::Core(_) | CliError::Partial { .. } => 3,
            CliError::Io { .. } => 1,
        }
    }
}
