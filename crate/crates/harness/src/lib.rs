//! Experiment harness: toy datasets, training pipelines, model persistence,
//! run records, and the command-line entry point that drives them.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod experiments;
pub mod record;
pub mod train;

pub use cli::run_cli;
