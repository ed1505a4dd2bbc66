//! Data-driven residual dynamics `Fa`: a ReLU MLP for vector states and a
//! three-layer ConvNet for grid fields.
//!
//! Parameters live in a shared [`ParamSet`] under the `fa.` prefix; the
//! model itself only carries its architecture.

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Padding, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::integrators::DynamicsModel;
use crate::rng;
use crate::scalar::Real;

pub const PARAM_PREFIX: &str = "fa.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub output: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            input: 2,
            hidden_units: 200,
            hidden_layers: 3,
            output: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub channels: usize,
    pub hidden_channels: usize,
    pub padding: Padding,
}

impl ConvNetSpec {
    pub fn new(padding: Padding) -> Self {
        Self {
            channels: 2,
            hidden_channels: 16,
            padding,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AugmentModel {
    Mlp(MlpSpec),
    ConvNet(ConvNetSpec),
}

impl AugmentModel {
    /// Parameter names and shapes, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match *self {
            AugmentModel::Mlp(s) => {
                let mut width = s.input;
                for l in 0..=s.hidden_layers {
                    let next = if l == s.hidden_layers { s.output } else { s.hidden_units };
                    out.push((format!("{PARAM_PREFIX}l{l}.w"), vec![width, next]));
                    out.push((format!("{PARAM_PREFIX}l{l}.b"), vec![next]));
                    width = next;
                }
            }
            AugmentModel::ConvNet(s) => {
                let h = s.hidden_channels;
                let layers = [(s.channels, h), (h, h), (h, s.channels)];
                for (l, (ci, co)) in layers.into_iter().enumerate() {
                    out.push((format!("{PARAM_PREFIX}conv{l}.w"), vec![co, ci, 3, 3]));
                    out.push((format!("{PARAM_PREFIX}conv{l}.b"), vec![co]));
                    if l < 2 {
                        out.push((format!("{PARAM_PREFIX}bn{l}.gamma"), vec![co]));
                        out.push((format!("{PARAM_PREFIX}bn{l}.beta"), vec![co]));
                    }
                }
            }
        }
        out
    }

    /// Fan-in uniform weights `U(−1/√fan_in, 1/√fan_in)`, zero biases,
    /// unit batchnorm scale and zero shift.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (i, (name, shape)) in self.param_shapes().into_iter().enumerate() {
            let value = if name.ends_with(".w") {
                let fan_in = match shape.len() {
                    2 => shape[0],
                    _ => shape[1] * 9,
                };
                let s = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new(-s, s).expect("valid range");
                let mut rng = rng::stream(seed, 0xFA, i as u64);
                Tensor::from_fn(shape, |_| T::lit(rng.sample(dist)))
            } else if name.ends_with(".gamma") {
                Tensor::full(shape, T::one())
            } else {
                Tensor::zeros(shape)
            };
            out.insert(name, value).expect("unique names");
        }
        out
    }

    fn param<T: Real>(g: &mut Graph<T>, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        g.input(&format!("{PARAM_PREFIX}{name}"), shape, true)
    }
}

impl<T: Real> DynamicsModel<T> for AugmentModel {
    fn build(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        match *self {
            AugmentModel::Mlp(s) => {
                if shape.len() != 2 || shape[1] != s.input || s.input != s.output {
                    return Err(Error::Shape(format!(
                        "mlp expects [B, {}] states, got {shape:?}",
                        s.input
                    )));
                }
                let mut h = x;
                let mut width = s.input;
                for l in 0..=s.hidden_layers {
                    let last = l == s.hidden_layers;
                    let next = if last { s.output } else { s.hidden_units };
                    let w = Self::param(g, &format!("l{l}.w"), vec![width, next])?;
                    let b = Self::param(g, &format!("l{l}.b"), vec![next])?;
                    h = g.affine(h, w, Some(b))?;
                    if !last {
                        h = g.relu(h);
                    }
                    width = next;
                }
                Ok(h)
            }
            AugmentModel::ConvNet(s) => {
                if shape.len() != 4 || shape[1] != s.channels {
                    return Err(Error::Shape(format!(
                        "convnet expects [B, {}, H, W] states, got {shape:?}",
                        s.channels
                    )));
                }
                let hc = s.hidden_channels;
                let layers = [(s.channels, hc), (hc, hc), (hc, s.channels)];
                let mut h = x;
                for (l, (ci, co)) in layers.into_iter().enumerate() {
                    let w = Self::param(g, &format!("conv{l}.w"), vec![co, ci, 3, 3])?;
                    let b = Self::param(g, &format!("conv{l}.b"), vec![co])?;
                    h = g.conv2d(h, w, Some(b), s.padding)?;
                    if l < 2 {
                        let gamma = Self::param(g, &format!("bn{l}.gamma"), vec![co])?;
                        let beta = Self::param(g, &format!("bn{l}.beta"), vec![co])?;
                        h = g.batchnorm(h, gamma, beta)?;
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
        }
    }
}
