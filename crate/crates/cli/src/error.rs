//! CLI error type mapping failures to distinct exit codes.

use std::fmt;

use cropmap_core::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable/invalid config, unknown keys. Exit 2.
    Usage(String),
    /// Unknown profile/paradigm preset name. Exit 3.
    UnknownPreset(String),
    /// Dataset missing, unreadable, or malformed. Exit 4.
    Dataset(Error),
    /// Checkpoint missing or incompatible with this build. Exit 5.
    Checkpoint(Error),
    /// Any other runtime failure. Exit 1.
    Other(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::UnknownPreset(_) => 3,
            CliError::Dataset(_) => 4,
            CliError::Checkpoint(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::UnknownPreset(msg) => write!(f, "unknown preset: {msg}"),
            CliError::Dataset(e) => write!(f, "dataset: {e}"),
            CliError::Checkpoint(e) => write!(f, "checkpoint: {e}"),
            CliError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        match e {
            Error::CheckpointIncompatible(_) => CliError::Checkpoint(e),
            _ => CliError::Other(e),
        }
    }
}
