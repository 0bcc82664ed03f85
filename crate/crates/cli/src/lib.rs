//! Config-driven batch commands behind the `reidtr` binary.

pub mod commands;
pub mod config;

pub use commands::{CliError, CliResult};
pub use config::RunConfig;
