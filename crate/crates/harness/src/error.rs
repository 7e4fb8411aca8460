use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error("{what} was produced under config {found}, current config is {expected}")]
    HashMismatch { what: String, expected: String, found: String },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("need {needed} checkpoints for {needed} policy seeds, found {found}")]
    TooFewCheckpoints { needed: usize, found: usize },
    #[error("bad input: {0}")]
    Format(String),
    #[error(transparent)]
    Env(#[from] rlamr_core::EnvError),
    #[error(transparent)]
    Agent(#[from] rlamr_agent::AgentError),
    #[error(transparent)]
    Nn(#[from] rlamr_nn::NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
