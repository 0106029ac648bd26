//! Library behind the `seam` binary; the subcommands are plain functions so
//! they can be driven from tests.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod plot;

pub use config::RunConfig;
