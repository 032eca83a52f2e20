//! Experiment commands for tclab: training, sampling, evaluation, sweeps.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod stats;

pub use commands::Context;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
