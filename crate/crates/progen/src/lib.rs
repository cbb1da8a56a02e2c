//! File formats, run configuration and command implementations for the
//! `progen` forecasting CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod verify;

pub use error::{CliError, Result};
