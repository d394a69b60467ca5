//! Command implementations behind the `attnprior` binary. Each command reads
//! a [`config::RunConfig`], writes its artifacts under the output directory
//! and returns a summary the binary prints.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod svg;

pub use error::{CliError, Result};
