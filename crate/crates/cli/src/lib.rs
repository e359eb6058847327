//! Reproducible experiments on top of `dfil-core`: configuration, runners
//! and CSV/JSON output for the `dfil` binary.

pub mod config;
mod error;
pub mod io;
pub mod run;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
