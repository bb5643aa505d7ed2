//! Experiment harness for `ctflow`: declarative TOML specs, one recipe per
//! experiment kind, hashed manifests and long-form plot tables.

pub mod artifact;
pub mod manifest;
pub mod recipes;
pub mod selftest;
pub mod spec;

use std::fmt;

pub use manifest::{emit_plotdata, run, sweep_h, FileEntry, Manifest, SeedSummary};
pub use spec::{Experiment, ExperimentSpec, ValidationError};

#[derive(Debug)]
pub enum CliError {
    Validation(ValidationError),
    Run(ctflow::Error),
    Io(std::io::Error),
    Usage(String),
}

impl CliError {
    /// 2 for bad input, 3 for numeric failure, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Usage(_) => 2,
            CliError::Run(e) if e.is_numeric() => 3,
            CliError::Run(ctflow::Error::Config(_) | ctflow::Error::Size(_) | ctflow::Error::Format(_)) => 2,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(e) => write!(f, "{e}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
            CliError::Usage(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        CliError::Validation(e)
    }
}

impl From<ctflow::Error> for CliError {
    fn from(e: ctflow::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}
