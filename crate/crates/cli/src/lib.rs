//! Library side of the `ancilla-qpd` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use error::CliError;
