//! Command-line front end: config loading, run manifests and subcommands.

pub mod app;
pub mod config;
pub mod manifest;
