//! Koopman surrogate in the lifted-linear form: an encoder ψ maps the
//! normalized plant state to a latent vector that evolves linearly,
//! `z_{k+1} = A z_k + B u_k`, and is decoded by `x̂_k = C z_k`.

mod dataset;
mod si;

pub use dataset::{generate_dataset, DatasetConfig, Trajectory, TrajectoryDataset};
pub use si::{
    mean_predictor_rmse, multi_step_rmse, seed_sweep, train_si, window_loss, SiConfig, SiReport,
    SweepResult,
};

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adgraph::{checkpoint, Activation, Bound, Mlp, NodeId, ParamSet, Tape, Tensor};
use crate::error::{Error, GraphError, Result};

pub const STATE_DIM: usize = 2;
pub const INPUT_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KoopmanConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for KoopmanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![4, 6],
        }
    }
}

/// Per-channel affine normalization of (c, T) and (ρ, F).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: [f64; 2],
    pub state_scale: [f64; 2],
    pub input_mean: [f64; 2],
    pub input_scale: [f64; 2],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            state_mean: [0.0; 2],
            state_scale: [1.0; 2],
            input_mean: [0.0; 2],
            input_scale: [1.0; 2],
        }
    }
}

impl Normalizer {
    pub fn state(&self, x: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| (x[i] - self.state_mean[i]) / self.state_scale[i])
    }

    pub fn state_inv(&self, x: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| x[i] * self.state_scale[i] + self.state_mean[i])
    }

    pub fn input(&self, u: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| (u[i] - self.input_mean[i]) / self.input_scale[i])
    }

    pub fn input_inv(&self, u: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| u[i] * self.input_scale[i] + self.input_mean[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    pub config: KoopmanConfig,
    pub encoder: Mlp,
    pub params: ParamSet,
    pub norm: Normalizer,
}

impl KoopmanModel {
    /// Random encoder, `A = I`, `B = 0`, `C = 0`. Call [`Self::fit_decoder`]
    /// to set `C` from data.
    pub fn new(config: KoopmanConfig, norm: Normalizer, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![STATE_DIM];
        sizes.extend(&config.hidden);
        sizes.push(config.latent_dim);
        let encoder = Mlp::new("encoder", &sizes, Activation::Tanh);
        let mut params = ParamSet::new();
        encoder.init(&mut params, rng);
        let n = config.latent_dim;
        params.insert("A", Tensor::eye(n));
        params.insert("B", Tensor::zeros(&[n, INPUT_DIM]));
        params.insert("C", Tensor::zeros(&[STATE_DIM, n]));
        Self {
            config,
            encoder,
            params,
            norm,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn a(&self) -> &Tensor {
        self.params.expect("A")
    }

    pub fn b(&self) -> &Tensor {
        self.params.expect("B")
    }

    pub fn c(&self) -> &Tensor {
        self.params.expect("C")
    }

    /// Least-squares decoder `C = argmin Σ‖C ψ(x) − x‖²` over normalized states.
    pub fn fit_decoder(&mut self, states: &[[f64; 2]]) {
        let n = self.latent_dim();
        let mut zzt = DMatrix::<f64>::zeros(n, n);
        let mut xzt = DMatrix::<f64>::zeros(STATE_DIM, n);
        for x in states {
            let z = self.encode_plain(*x);
            for i in 0..n {
                for j in 0..n {
                    zzt[(i, j)] += z[i] * z[j];
                }
                for r in 0..STATE_DIM {
                    xzt[(r, i)] += x[r] * z[i];
                }
            }
        }
        for i in 0..n {
            zzt[(i, i)] += 1e-8 * states.len().max(1) as f64;
        }
        let c = match zzt.clone().cholesky() {
            Some(ch) => (ch.solve(&xzt.transpose())).transpose(),
            None => xzt * zzt.pseudo_inverse(1e-12).expect("pseudo-inverse"),
        };
        let data: Vec<f64> = (0..STATE_DIM)
            .flat_map(|r| (0..n).map(move |i| (r, i)))
            .map(|(r, i)| c[(r, i)])
            .collect();
        self.params.insert("C", Tensor::matrix(STATE_DIM, n, data));
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.params.iter() {
            if !t.all_finite() {
                return Err(Error::Graph(GraphError::NonFiniteGradient(format!(
                    "model parameter {name} is not finite"
                ))));
            }
        }
        Ok(())
    }

    /// Encoder forward pass; `x` is a normalized state vector (2,) or a batch (B, 2).
    pub fn encode(&self, tape: &Tape, bound: &Bound, x: NodeId) -> Result<NodeId, GraphError> {
        if tape.shape(x).len() == 1 {
            self.encoder.forward_vec(tape, bound, x)
        } else {
            self.encoder.forward(tape, bound, x)
        }
    }

    /// Open-loop prediction for one trajectory. `x0` is (2,), each control is a
    /// normalized (2,) vector; returns predicted normalized states x̂₁..x̂_K.
    /// The encoder runs once, at k = 0.
    pub fn rollout(
        &self,
        tape: &Tape,
        bound: &Bound,
        x0: NodeId,
        controls: &[NodeId],
    ) -> Result<Vec<NodeId>, GraphError> {
        let (a, b, c) = (bound.get("A"), bound.get("B"), bound.get("C"));
        let mut z = self.encode(tape, bound, x0)?;
        let mut out = Vec::with_capacity(controls.len());
        for &u in controls {
            let az = tape.matmul(a, z)?;
            let bu = tape.matmul(b, u)?;
            z = tape.add(az, bu)?;
            out.push(tape.matmul(c, z)?);
        }
        Ok(out)
    }

    /// Batched open-loop prediction: `x0` is (B, 2), controls are K nodes of
    /// shape (B, 2). Returns K nodes of shape (B, 2).
    pub fn rollout_batch(
        &self,
        tape: &Tape,
        bound: &Bound,
        x0: NodeId,
        controls: &[NodeId],
    ) -> Result<Vec<NodeId>, GraphError> {
        let at = tape.transpose(bound.get("A"));
        let bt = tape.transpose(bound.get("B"));
        let ct = tape.transpose(bound.get("C"));
        let mut z = self.encode(tape, bound, x0)?;
        let mut out = Vec::with_capacity(controls.len());
        for &u in controls {
            let az = tape.matmul(z, at)?;
            let bu = tape.matmul(u, bt)?;
            z = tape.add(az, bu)?;
            out.push(tape.matmul(z, ct)?);
        }
        Ok(out)
    }

    pub fn encode_plain(&self, x: [f64; 2]) -> Vec<f64> {
        self.encoder.eval(&self.params, &x)
    }

    /// Plain-float counterpart of [`Self::rollout`].
    pub fn rollout_plain(&self, x0: [f64; 2], controls: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let n = self.latent_dim();
        let (a, b, c) = (self.a().data(), self.b().data(), self.c().data());
        let mut z = self.encode_plain(x0);
        let mut out = Vec::with_capacity(controls.len());
        for u in controls {
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    (0..n).map(|j| a[i * n + j] * z[j]).sum::<f64>()
                        + b[i * INPUT_DIM] * u[0]
                        + b[i * INPUT_DIM + 1] * u[1]
                })
                .collect();
            z = next;
            out.push([0, 1].map(|r| (0..n).map(|j| c[r * n + j] * z[j]).sum()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "koopman",
            "config": self.config,
            "norm": self.norm,
        });
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        Self::from_parts(params, &meta)
    }

    pub fn from_parts(params: ParamSet, meta: &serde_json::Value) -> Result<Self> {
        let config: KoopmanConfig = serde_json::from_value(meta["config"].clone())?;
        let norm: Normalizer = serde_json::from_value(meta["norm"].clone())?;
        let mut sizes = vec![STATE_DIM];
        sizes.extend(&config.hidden);
        sizes.push(config.latent_dim);
        let model = Self {
            encoder: Mlp::new("encoder", &sizes, Activation::Tanh),
            config,
            params,
            norm,
        };
        for name in ["A", "B", "C"] {
            if model.params.get(name).is_none() {
                return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
            }
        }
        Ok(model)
    }
}
