//! Configuration schema, presets and subcommand implementations of the
//! `fastdiff` binary, exposed as a library for integration tests and
//! acceptance suites.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{exit_code, RunContext};
pub use config::{preset, Config, PRESETS};
