//! Scenario runner for the snitch detector: config files, output formats,
//! parallel suites and ROC sweeps.

pub mod error;
pub mod files;
pub mod runner;

pub use error::{HarnessError, Result};
