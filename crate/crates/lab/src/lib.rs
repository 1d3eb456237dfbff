//! Experiment harness: configuration, trial matrices, the theory check
//! suite, and CSV/JSON reporting.

pub mod average;
pub mod balance;
pub mod config;
pub mod format;
pub mod report;
pub mod sgd;
pub mod theory_suite;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] moshpit_core::Error),
}

/// Exit code for a run whose checks did not all pass.
pub const EXIT_CHECKS_FAILED: i32 = 1;
/// Exit code for any configuration, input or output problem.
pub const EXIT_CONFIG: i32 = 2;

pub type LabResult<T> = std::result::Result<T, LabError>;

pub(crate) fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}
