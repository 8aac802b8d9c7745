//! Command-line front end: weight files, the latency harness and the
//! `sgmoe` subcommands.

pub mod bench;
pub mod commands;
pub mod config;
pub mod weights;

pub use commands::{exit_code, run, Cli};
