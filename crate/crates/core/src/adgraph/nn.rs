use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamSet};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::GraphError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Elu,
}

/// Fully connected network; hidden layers use `activation`, the output layer is linear.
///
/// Parameters live in a [`ParamSet`] under `{prefix}.w{i}` (fan_in × fan_out)
/// and `{prefix}.b{i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
            activation,
        }
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) weights and biases.
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert(&self.weight_name(l), Tensor::matrix(fan_in, fan_out, w));
            params.insert(&self.bias_name(l), Tensor::vector(b));
        }
    }

    /// Forward pass on a batch `x` of shape (batch, in); returns (batch, out).
    pub fn forward(&self, tape: &Tape, bound: &Bound, x: NodeId) -> Result<NodeId, GraphError> {
        let mut h = x;
        for l in 0..self.layers() {
            h = tape.matmul(h, bound.get(&self.weight_name(l)))?;
            h = tape.add_row(h, bound.get(&self.bias_name(l)))?;
            if l + 1 < self.layers() {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Elu => tape.elu(h),
                };
            }
        }
        Ok(h)
    }

    /// Forward pass for a single input vector; returns a vector.
    pub fn forward_vec(&self, tape: &Tape, bound: &Bound, x: NodeId) -> Result<NodeId, GraphError> {
        let n = tape.shape(x).iter().product::<usize>();
        let row = tape.reshape(x, &[1, n])?;
        let out = self.forward(tape, bound, row)?;
        let m = *self.sizes.last().expect("sizes");
        tape.reshape(out, &[m])
    }

    /// Plain evaluation without recording gradients.
    pub fn eval(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..self.layers() {
            let w = params.expect(&self.weight_name(l));
            let b = params.expect(&self.bias_name(l));
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut out = b.data().to_vec();
            for (i, &hi) in h.iter().enumerate().take(fan_in) {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += hi * w.data()[i * fan_out + j];
                }
            }
            if l + 1 < self.layers() {
                for o in &mut out {
                    *o = match self.activation {
                        Activation::Tanh => o.tanh(),
                        Activation::Elu => {
                            if *o > 0.0 {
                                *o
                            } else {
                                o.exp() - 1.0
                            }
                        }
                    };
                }
            }
            h = out;
        }
        h
    }
}
