//! Quadtree meshes, discontinuous finite-element functions, an upwind DG
//! advection solver and the refinement environment built on top of them.

pub mod baselines;
pub mod basis;
pub mod env;
pub mod functions;
pub mod mesh;
pub mod rng;
pub mod solver;

pub use basis::{FeError, FeFunction, NodalBasis};
pub use env::{AmrEnv, EnvConfig, EnvError, GlobalState, RewardMode};
pub use functions::{FunctionClass, Mode, TrueSolution};
pub use mesh::{AdjacencyGraph, Element, ElementId, MeshError, QuadMesh};
