//! Pipeline wiring for the `cghvp` binary: config parsing, manifests, subcommands and the oracle suite.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod verify;

pub use commands::Variant;
pub use error::{CliError, CliResult};
