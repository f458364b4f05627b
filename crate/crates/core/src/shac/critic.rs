use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adgraph::{Activation, Adam, Bound, Mlp, NodeId, ParamSet, Tape, Tensor};
use crate::cstr_env::{EnvConfig, Interval, PlantState, PriceSeries};
use crate::error::{Error, Result};

/// Maps (c, T, storage, price forecast) to the critic input.
///
/// States are centred on their bound midpoints and divided by half the span,
/// so the feasible box maps to [−1, 1]. Prices are standardized with the
/// statistics of the training series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub bounds: [Interval; 3],
    pub price_mean: f64,
    pub price_std: f64,
    pub horizon: usize,
}

impl FeatureMap {
    pub fn new(env: &EnvConfig, prices: &PriceSeries, horizon: usize) -> Self {
        Self {
            bounds: env.state_bounds(),
            price_mean: prices.mean(),
            price_std: prices.std().max(1e-9),
            horizon,
        }
    }

    pub fn dim(&self) -> usize {
        3 + self.horizon
    }

    fn centre(&self) -> [f64; 3] {
        self.bounds.map(|b| 0.5 * (b.lo + b.hi))
    }

    fn inv_half_span(&self) -> [f64; 3] {
        self.bounds.map(|b| 2.0 / b.span())
    }

    fn price_features(&self, prices: &[f64]) -> Vec<f64> {
        prices
            .iter()
            .take(self.horizon)
            .map(|p| (p - self.price_mean) / self.price_std)
            .collect()
    }

    pub fn plain(&self, state: &PlantState, prices: &[f64]) -> Vec<f64> {
        let (m, s) = (self.centre(), self.inv_half_span());
        let mut out: Vec<f64> = state
            .as_array()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - m[i]) * s[i])
            .collect();
        out.extend(self.price_features(prices));
        out
    }

    /// Features as a vector node, differentiable in the three state nodes.
    pub fn on_tape(&self, tape: &Tape, state: [NodeId; 3], prices: &[f64]) -> Result<NodeId> {
        let x = tape.concat(&state, 0)?;
        let neg: Vec<f64> = self.centre().iter().map(|v| -v).collect();
        let x = tape.offset(x, &Tensor::vector(neg))?;
        let s = tape.constant(Tensor::vector(self.inv_half_span().to_vec()));
        let x = tape.mul(x, s)?;
        let p = tape.constant(Tensor::vector(self.price_features(prices)));
        Ok(tape.concat(&[x, p], 0)?)
    }
}

/// State-value network with a slowly tracking target copy.
///
/// The network output is multiplied by `value_scale` so that returns of
/// order one hundred are reachable from an initialization near zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub net: Mlp,
    pub params: ParamSet,
    pub target: ParamSet,
    pub features: FeatureMap,
    pub value_scale: f64,
}

impl Critic {
    pub fn new(features: FeatureMap, hidden: &[usize], value_scale: f64, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![features.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::new("critic", &sizes, Activation::Elu);
        let mut params = ParamSet::new();
        net.init(&mut params, rng);
        Self {
            net,
            target: params.clone(),
            params,
            features,
            value_scale,
        }
    }

    /// Value under `params` (online or target) on plain floats.
    pub fn value(&self, params: &ParamSet, state: &PlantState, prices: &[f64]) -> f64 {
        self.value_of(params, &self.features.plain(state, prices))
    }

    pub fn value_of(&self, params: &ParamSet, features: &[f64]) -> f64 {
        self.value_scale * self.net.eval(params, features)[0]
    }

    /// Scalar value node for a feature vector node.
    pub fn value_on_tape(&self, tape: &Tape, bound: &Bound, features: NodeId) -> Result<NodeId> {
        let v = self.net.forward_vec(tape, bound, features)?;
        let v = tape.element(v, 0)?;
        Ok(tape.scale(v, self.value_scale))
    }

    /// Mean squared error of the online network over `(features, target)` pairs.
    pub fn regression_loss(&self, rows: &[Vec<f64>], targets: &[f64]) -> f64 {
        let n = rows.len().max(1) as f64;
        rows.iter()
            .zip(targets)
            .map(|(x, y)| (self.value_of(&self.params, x) - y).powi(2))
            .sum::<f64>()
            / n
    }

    /// One Adam step on the mean squared error of a batch; returns the loss before the step.
    pub fn regression_step(&mut self, adam: &mut Adam, rows: &[&[f64]], targets: &[f64]) -> Result<f64> {
        let d = self.features.dim();
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(Tensor::matrix(rows.len(), d, rows.concat()));
        let v = tape.scale(self.net.forward(&tape, &bound, x)?, self.value_scale);
        let neg: Vec<f64> = targets.iter().map(|t| -t).collect();
        let err = tape.offset(v, &Tensor::matrix(rows.len(), 1, neg))?;
        let loss = tape.mean(tape.square(err));
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(format!("critic regression loss {value}")));
        }
        let grads = bound.gradients(&tape.backward(loss)?);
        adam.step(&mut self.params, &grads)?;
        Ok(value)
    }

    pub fn soft_update_target(&mut self, tau: f64) {
        self.target.soft_update(&self.params, tau);
    }
}
