//! Command-line companion to `t2d-core`: file formats, configuration, and
//! the subcommand implementations. The binary in `main.rs` is a thin clap
//! wrapper over [`commands`].

pub mod commands;
pub mod config;
pub mod error;
pub mod format;
