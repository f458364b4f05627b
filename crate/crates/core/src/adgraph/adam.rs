use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::GraphError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: ParamSet,
    second: ParamSet,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: ParamSet::new(),
            second: ParamSet::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` (descent direction: −grads).
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), GraphError> {
        if params.len() != grads.len() {
            return Err(GraphError::UnknownParam(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((pn, p), (gn, g)) in params.iter().zip(grads.iter()) {
            if pn != gn {
                return Err(GraphError::UnknownParam(gn.to_string()));
            }
            if p.shape() != g.shape() {
                return Err(GraphError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(GraphError::NonFiniteGradient(gn.to_string()));
            }
        }
        if self.first.is_empty() {
            self.first = params.zeros_like();
            self.second = params.zeros_like();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let g = grads.expect(name);
            let m = self.first.get_mut(name).expect("moment");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.second.get_mut(name).expect("moment");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.first.expect(name);
            let v = self.second.expect(name);
            let p = params.get_mut(name).expect("param");
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
