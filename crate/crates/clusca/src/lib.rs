//! Experiment front end for [`clusca_core`]: TOML configuration, the `run`,
//! `compare` and `sweep` commands, and JSON/CSV output.
//!
//! Exit codes of the binary: 0 success, 1 I/O or internal failure, 2
//! configuration error, 3 numerical divergence.

pub mod cli;
pub mod config;
mod error;
pub mod output;
pub mod runner;

pub use config::{Axis, ExperimentConfig, PolicySpec, SeedConfig};
pub use error::{CliError, Result};
