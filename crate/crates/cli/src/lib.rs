//! Command-line front end for `rticert`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 invalid
//! estimation (contraction violated or insufficient data).

pub mod commands;
pub mod config;
pub mod trace_csv;

use rticert::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("estimation invalid: {0}")]
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Estimation(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::ContractionViolation { .. } | Error::Estimation(_) => CliError::Estimation(e.to_string()),
            Error::Parse { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
