//! Library surface of the `dmb` binary: run configuration, checkpoint
//! IO, and the command implementations. The binary in `main.rs` only
//! parses flags and maps errors to exit codes.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
