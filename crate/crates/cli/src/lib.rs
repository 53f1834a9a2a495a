//! Stage-per-subcommand driver for the hybrid LoRA pipeline.

pub mod config;
pub mod error;
pub mod run;

pub use config::{Overrides, RunConfig, OUTPUT_ROOT_ENV};
pub use error::CliError;
