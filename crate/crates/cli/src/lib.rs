//! Orchestration of the genotype-by-environment pipeline: configuration,
//! fold handling, model runs, hyperparameter search and run manifests.

pub mod commands;
pub mod config;
mod error;
pub mod manifest;
pub mod pipeline;
pub mod tune;

pub use commands::{run, Command};
pub use config::RunConfig;
pub use error::{CliError, Result};
