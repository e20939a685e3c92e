//! Command-line front end: configuration parsing and the subcommands.

pub mod commands;
pub mod config;

pub use config::RunConfig;
