//! Experiment harness: versioned configs, dataset generation, training runs,
//! the sigma-recovery table, the cross-condition Dice grid, and reports.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
