use fooling::data::DataError;
use fooling::fooling::FoolError;
use fooling::interpreters::InterpError;
use fooling::metrics::MetricsError;
use fooling::model::{ArchError, CheckpointError, ModelError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, missing input files or an invalid config file.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Arch(#[from] ArchError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Interp(#[from] InterpError),
    #[error("{0}")]
    Fool(#[from] FoolError),
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Stable tag printed in front of the message.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Checkpoint(e) => e.code(),
            CliError::Arch(_) => "arch",
            CliError::Model(_) => "model",
            CliError::Interp(_) => "interpreter",
            CliError::Fool(FoolError::Diverged { .. }) => "diverged",
            CliError::Fool(_) => "fooling",
            CliError::Metrics(_) => "metrics",
            CliError::Json(_) => "json",
        }
    }

    /// `error[code]: message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.code(), msg.trim())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
