//! File formats and the command-line driver around `moma-core`.

pub mod checkpoint;
pub mod commands;
pub mod config_file;
pub mod error;
pub mod report;

pub use error::{CliError, Result};
