//! Configuration and subcommands of the `deepc` tool.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
