//! Command-line pipeline: simulate, localize, reconstruct, detect, eval.

pub mod commands;
pub mod config;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("solver failure: {0}")]
    Solver(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 data, 4 solver.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

impl From<crloc_core::Error> for CliError {
    fn from(e: crloc_core::Error) -> Self {
        use crloc_core::Error as E;
        match e {
            E::Unobservable { .. } => CliError::Solver(e.to_string()),
            E::InvalidGrid(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
