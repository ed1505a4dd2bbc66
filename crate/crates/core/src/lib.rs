//! Hybrid physical / data-driven dynamics learning.
//!
//! Observed dynamics `dX/dt = F(X)` are decomposed as `F = Fp + Fa`, where
//! `Fp` comes from a parametric physical family and `Fa` is a neural
//! residual whose norm is minimized under a trajectory-fit constraint. The
//! constrained problem is solved with a method-of-multipliers style
//! schedule on the constraint weight.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the data pipeline,
//! persistence and metrics use.

pub mod augment;
pub mod checkpoint;
pub mod datagen;
pub mod diffcore;
mod error;
pub mod experiment;
pub mod integrators;
pub mod metrics;
pub mod physics;
mod rng;
mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Graph64 = diffcore::Graph<f64>;
pub type ParamSet64 = diffcore::ParamSet<f64>;
pub type AugmentedModel64 = training::AugmentedModel<f64>;
pub type Trajectory64 = integrators::Trajectory<f64>;

pub type Tensor32 = diffcore::Tensor<f32>;
pub type Graph32 = diffcore::Graph<f32>;
pub type AugmentedModel32 = training::AugmentedModel<f32>;
