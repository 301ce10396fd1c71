//! Library half of the round-trip command-line tool: config parsing
//! and validation, run manifests, and the subcommand implementations.
//! The binary in `main.rs` is a thin argument-parsing wrapper so that
//! integration tests can drive every command in-process.

pub mod commands;
pub mod config;
pub mod manifest;
