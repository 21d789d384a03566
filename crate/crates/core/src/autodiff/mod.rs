//! Reverse-mode differentiation over dense tensors.

mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{BatchStats, Graph, Var};
pub use optim::{AdamConfig, AdamState, CosineSchedule};
pub use params::{Gradients, Param, ParamId, ParamStore};
