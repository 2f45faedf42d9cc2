//! Command implementations behind the `zeropp` binary.

pub mod commands;
pub mod config;
pub mod error;
mod report;

pub use config::RunConfig;
pub use error::{CliError, Result};
