//! Library surface of the command-line driver, exposed so integration
//! tests can run commands in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::run;
pub use error::CliError;
