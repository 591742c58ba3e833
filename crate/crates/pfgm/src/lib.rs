//! Command-line runner for `pfgm-core`: run configuration, file formats,
//! manifests and the subcommands behind the `pfgm` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod svg;

pub use config::RunConfig;
pub use error::CliError;
