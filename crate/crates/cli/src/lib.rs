//! Command-line front end for the path sampler: configuration files,
//! observation files, output formats and the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod observations;
pub mod output;

pub use config::{parse_config, parse_config_str, Overrides, RunPlan};
pub use error::{CliError, Result};
