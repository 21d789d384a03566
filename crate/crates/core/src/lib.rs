//! Spiking neural networks trained with surrogate gradients, soft-DTW
//! temporal alignment over replayed multi-resolution logits, and the
//! replay-based continual learning baselines they are compared against.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod lif;
pub mod metrics;
pub mod replay;
pub mod sdtw;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
