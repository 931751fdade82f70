//! File formats, configuration, benchmarks and commands for binarized restoration networks.

pub mod ablate;
pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod imageio;
pub mod model;

pub use error::{CliError, CliResult};
