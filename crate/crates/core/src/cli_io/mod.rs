//! Command-line surface: JSON run configuration, the six commands and their
//! export formats.
//!
//! Every command is a pure function of `(config, seed)`: outputs are written
//! in a fixed order with round-trip-exact numbers, the resolved configuration
//! (minus the output directory) is embedded in every JSON result, and the
//! worker count never changes a result.

mod commands;
pub mod config;
pub mod export;

pub use commands::{run, CliError, Command, RunOptions};
pub use config::*;
