use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing input {path}: {reason}")]
    MissingInput { path: PathBuf, reason: String },
    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn input(path: &Path, e: std::io::Error) -> Self {
        CliError::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }

    pub fn failed(e: impl std::fmt::Display) -> Self {
        CliError::Failed(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingInput { .. } => 2,
            CliError::Config { .. } => 3,
            CliError::Failed(_) => 1,
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::MissingInput { path, reason } => json!({
                "error": "missing_input",
                "path": path.display().to_string(),
                "message": reason,
            }),
            CliError::Config { field, message } => json!({
                "error": "invalid_config",
                "field": field,
                "message": message,
            }),
            CliError::Failed(message) => json!({
                "error": "failed",
                "message": message,
            }),
        }
    }
}

impl From<panelfx_core::output::OutputError> for CliError {
    fn from(e: panelfx_core::output::OutputError) -> Self {
        CliError::Failed(e.to_string())
    }
}
