use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] blendeform::Error),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {message}")]
    ConfigParse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("attribute transfer check failed: {0}")]
    TransferFailed(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config { .. } => "config",
            CliError::ConfigParse { .. } => "config_parse",
            CliError::Io { .. } => "io",
            CliError::TransferFailed(_) => "transfer_failed",
        }
    }

    /// Configuration problems exit with 2, failures during a run with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::ConfigParse { .. } => 2,
            CliError::Core(blendeform::Error::Config { .. }) => 2,
            _ => 1,
        }
    }

    /// The one-line JSON record printed on failure.
    pub fn record(&self) -> String {
        let field = match self {
            CliError::Config { field, .. } | CliError::Core(blendeform::Error::Config { field, .. }) => Some(field.as_str()),
            _ => None,
        };
        let mut rec = json!({ "error": self.kind(), "message": self.to_string() });
        if let Some(f) = field {
            rec["field"] = json!(f);
        }
        rec.to_string()
    }
}
