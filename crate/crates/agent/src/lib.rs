//! Refinement policies and the policy-gradient trainers that fit them.

pub mod policies;
pub mod rl;
pub mod value;

pub use policies::{behavior_probs, greedy_action, sample_action, Arch, Policy, PolicyConfig};
pub use rl::{Algorithm, EpisodeRow, TrainConfig, Trainer, Trajectory};
pub use value::ValueNet;

use rlamr_core::EnvError;
use rlamr_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("graph has {nodes} nodes but the state has {observations} leaf observations")]
    GraphMismatch { nodes: usize, observations: usize },
    #[error("state does not fit the policy: {0}")]
    StateMismatch(String),
    #[error("no valid action to sample")]
    NoValidAction,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint is for '{found}', expected '{expected}'")]
    ArchMismatch { expected: String, found: String },
}
