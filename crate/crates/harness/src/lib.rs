//! Experiment plumbing around the environment and agents: configuration,
//! the shared-seed evaluation protocol, CSV reports, decision timing and
//! SVG export.

pub mod config;
mod error;
pub mod eval;
pub mod replay;
pub mod svg;
pub mod timing;
pub mod train;

pub use config::{ConfigError, ExperimentConfig};
pub use error::HarnessError;
pub use eval::{aggregate, compare, evaluate, pooled_stderr, Aggregate, Agent, Contender, EvalReport, Protocol};
