//! Library surface of the CLI: run configuration, the checkpoint format,
//! and the command implementations. The `phsa` binary is a thin argument
//! parser over these.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
