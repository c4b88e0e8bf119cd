//! Configuration, experiment commands and artifact writing for the `trf`
//! binary.

pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, Result};
