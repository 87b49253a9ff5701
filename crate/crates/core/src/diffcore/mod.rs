//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Graph construction and backward are single-threaded. A [`Graph`] only
//! borrows parameters, so several threads can run forward passes over one
//! frozen [`ParamStore`] at the same time, each on its own graph.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::flops;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

/// LayerNorm epsilon used throughout the model.
pub const LAYERNORM_EPS: f64 = 1e-5;
