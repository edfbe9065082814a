//! Experiment driver for `permweave`: configuration, the end-to-end
//! pipeline, and the `permweave` command line.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{run, Cli};
pub use config::{ExperimentConfig, Variant};
pub use error::CliError;
