//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Gradients flow through the unrolled computation (discretize, then
//! optimize): every solver step and network layer becomes graph nodes.

mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, NodeId};
pub use kernels::Padding;
pub use params::{Bindings, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
