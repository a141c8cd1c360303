//! Command orchestration for the `illiquid` binary.
//!
//! Exit codes: 0 success, 1 configuration or I/O, 2 solver, 3 a Monte Carlo
//! check failed.

pub mod commands;
pub mod config;

pub use commands::{run, CliError, Command, Overrides};
pub use config::{ConfigError, RunConfig};
