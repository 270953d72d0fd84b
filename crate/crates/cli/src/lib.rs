//! Command-line plumbing around `tfl-core`: config files, experiment
//! commands and the artifacts they leave behind.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
