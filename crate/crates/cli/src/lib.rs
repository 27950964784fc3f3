//! Command-line driver: simulate datasets, train both stages, denoise,
//! evaluate and verify.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config error, 3 data
//! error, 4 training divergence.

pub mod commands;
pub mod config;

pub use commands::{CliError, CliResult, Run};
pub use config::{ConfigError, RunConfig};
