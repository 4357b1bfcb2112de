use std::path::PathBuf;
use std::process::ExitCode;

use odeformer::{ContainerError, Error};

/// Failures of a CLI run, each mapped to a documented exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Check(String),
    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("weights {path}: {source}")]
    Container {
        path: PathBuf,
        source: ContainerError,
    },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Engine(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Check(_) => 1,
            CliError::Input { .. } | CliError::Output { .. } => 3,
            CliError::Container { .. } => 4,
            CliError::Image { .. } => 5,
            CliError::Engine(_) => 6,
        })
    }
}
