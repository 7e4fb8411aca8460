//! Small reverse-mode autodiff over f64 tensors, with the optimizers and
//! checkpoint format used by the refinement policies.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use graph::{ConvGeom, Graph, Var};
pub use optim::{Adam, Sgd};
pub use params::{Grads, Init, Param, ParamId, ParamSet, DEFAULT_WEIGHT_STD};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("log-softmax segment has no unmasked entry")]
    EmptySegment,
    #[error("parameter '{0}' already exists")]
    DuplicateParam(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter layout does not match: {0}")]
    LayoutMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
