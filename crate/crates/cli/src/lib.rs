//! Experiment driver: configuration files, task caches and the `icicl`
//! subcommands.

pub mod app;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
