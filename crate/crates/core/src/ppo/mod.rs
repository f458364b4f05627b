//! Proximal policy optimization baseline. The plant is a black box: rewards
//! are plain numbers and only the log-density of the sampled controls is
//! differentiated, through the QP layer into the model parameters.

mod train;

pub use train::{
    collect_rollout, train, KoopmanGaussian, Observation, PpoRun, PpoTrainer, PpoUpdateStats, Rollout,
};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adgraph::{Adam, Bound, NodeId, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::shac::Critic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Environment steps per update, summed over all environments.
    pub rollout: usize,
    pub n_envs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Epochs stop once the approximate KL of a minibatch exceeds this.
    pub kl_limit: f64,
    /// Fixed per-channel log-std; `None` uses the controller's exploration σ.
    pub log_std: Option<Vec<f64>>,
    pub critic_hidden: Vec<usize>,
    pub value_scale: f64,
    pub total_steps: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 10,
            minibatch: 256,
            rollout: 2048,
            n_envs: 8,
            actor_lr: 1e-5,
            critic_lr: 1e-3,
            kl_limit: 0.15,
            log_std: None,
            critic_hidden: vec![64, 64],
            value_scale: 100.0,
            total_steps: 200_000,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, msg: &str| Error::Config {
            path: format!("ppo.{path}"),
            msg: msg.into(),
        };
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(err("clip", "must be in (0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(err("gamma", "must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(err("lambda", "must be in [0, 1]"));
        }
        if self.epochs == 0 {
            return Err(err("epochs", "must be >= 1"));
        }
        if self.minibatch == 0 {
            return Err(err("minibatch", "must be >= 1"));
        }
        if self.n_envs == 0 {
            return Err(err("n_envs", "must be >= 1"));
        }
        if self.rollout < self.n_envs {
            return Err(err("rollout", "must be >= n_envs"));
        }
        if !(self.actor_lr > 0.0) {
            return Err(err("actor_lr", "must be > 0"));
        }
        if !(self.critic_lr > 0.0) {
            return Err(err("critic_lr", "must be > 0"));
        }
        if !(self.kl_limit > 0.0) {
            return Err(err("kl_limit", "must be > 0"));
        }
        if let Some(ls) = &self.log_std {
            if ls.len() != 2 || ls.iter().any(|v| !v.is_finite()) {
                return Err(err("log_std", "needs two finite entries"));
            }
        }
        if !(self.value_scale > 0.0) {
            return Err(err("value_scale", "must be > 0"));
        }
        Ok(())
    }

    pub fn steps_per_env(&self) -> usize {
        self.rollout.div_ceil(self.n_envs)
    }
}

fn log_norm_const(std: &[f64]) -> f64 {
    std.iter().map(|s| s.ln() + 0.5 * (2.0 * PI).ln()).sum()
}

/// Diagonal-Gaussian log density on plain floats.
pub fn log_density(u: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    let quad: f64 = u.iter().zip(mean).zip(std).map(|((u, m), s)| ((u - m) / s).powi(2)).sum();
    -0.5 * quad - log_norm_const(std)
}

/// Diagonal-Gaussian log density of the fixed sample `u`, differentiable in
/// the mean node.
pub fn gaussian_logprob(tape: &Tape, u: &[f64], mean: NodeId, std: &[f64]) -> Result<NodeId> {
    if std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Invalid(format!("standard deviations must be > 0, got {std:?}")));
    }
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    let d = tape.offset(mean, &Tensor::vector(neg))?;
    let inv = tape.constant(Tensor::vector(std.iter().map(|s| 1.0 / s).collect()));
    let z = tape.mul(d, inv)?;
    let quad = tape.sum(tape.square(z));
    Ok(tape.add_const(tape.scale(quad, -0.5), -log_norm_const(std)))
}

/// Generalized advantage estimates and value targets of one trajectory.
///
/// `δ_t = r_t + γ V(x_{t+1}) − V(x_t)` and `A_t = δ_t + γλ A_{t+1}`, where the
/// recursion restarts after a step with `done` set. `next_values[t]` is the
/// value of the state reached by step `t`, so truncated episodes bootstrap.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        let carry = if dones[t] || t + 1 == n { 0.0 } else { next };
        adv[t] = delta + gamma * lambda * carry;
        next = adv[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt() + 1e-8;
    for a in adv {
        *a = (*a - mean) / std;
    }
}

/// Gaussian policy whose mean is a differentiable function of the parameters.
pub trait GaussianPolicy {
    type Obs;

    /// Mean control as a vector node.
    fn mean(&self, tape: &Tape, bound: &Bound, obs: &Self::Obs) -> Result<NodeId>;

    /// Mean control on plain floats.
    fn mean_value(&self, params: &ParamSet, obs: &Self::Obs) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = params.bind_const(&tape);
        let m = self.mean(&tape, &bound, obs)?;
        Ok(tape.value(m).into_data())
    }
}

/// One stored transition.
#[derive(Clone, Debug)]
pub struct PpoSample<O> {
    pub obs: O,
    /// Critic features of `obs`.
    pub features: Vec<f64>,
    /// Sampled control before clipping to the box.
    pub action: Vec<f64>,
    pub logp_old: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Clipped surrogate on one batch.
pub struct Surrogate {
    /// `−mean(min(ρA, clip(ρ, 1 ± ε)A))`.
    pub loss: NodeId,
    /// `mean(log π_old − log π)`.
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

pub fn surrogate_loss<P: GaussianPolicy>(
    tape: &Tape,
    bound: &Bound,
    policy: &P,
    samples: &[&PpoSample<P::Obs>],
    std: &[f64],
    clip: f64,
) -> Result<Surrogate> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty minibatch".into()));
    }
    let mut terms = Vec::with_capacity(samples.len());
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for s in samples {
        let mean = policy.mean(tape, bound, &s.obs)?;
        let logp = gaussian_logprob(tape, &s.action, mean, std)?;
        let log_ratio = tape.add_const(logp, -s.logp_old);
        let ratio = tape.exp(log_ratio);
        let r = tape.scalar_value(ratio);
        kl -= tape.scalar_value(log_ratio);
        if (r - 1.0).abs() > clip {
            clipped += 1;
        }
        let a = s.advantage;
        let unclipped = tape.scale(ratio, a);
        let bounded = tape.scale(tape.clamp(ratio, 1.0 - clip, 1.0 + clip), a);
        terms.push(tape.minimum(unclipped, bounded)?);
    }
    let n = samples.len() as f64;
    let total = tape.sum(tape.concat(&terms, 0)?);
    Ok(Surrogate {
        loss: tape.scale(total, -1.0 / n),
        approx_kl: kl / n,
        clip_fraction: clipped as f64 / n,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub epochs_run: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub stopped_early: bool,
}

/// Optimizers and settings shared by consecutive updates.
pub struct PpoOptim {
    pub actor: Adam,
    pub critic: Adam,
}

impl PpoOptim {
    pub fn new(cfg: &PpoConfig) -> Self {
        Self {
            actor: Adam::new(cfg.actor_lr),
            critic: Adam::new(cfg.critic_lr),
        }
    }
}

/// Clipped-surrogate epochs over shuffled minibatches. Advantages are used
/// as stored. The critic regresses onto the stored returns alongside.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<P: GaussianPolicy>(
    params: &mut ParamSet,
    policy: &P,
    critic: &mut Critic,
    batch: &[PpoSample<P::Obs>],
    std: &[f64],
    cfg: &PpoConfig,
    optim: &mut PpoOptim,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    let mut stats = PpoStats::default();
    if batch.is_empty() {
        return Ok(stats);
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let (mut pl, mut vl, mut kl, mut cf, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let samples: Vec<&PpoSample<P::Obs>> = chunk.iter().map(|&i| &batch[i]).collect();
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let sur = surrogate_loss(&tape, &bound, policy, &samples, std, cfg.clip)?;
            if sur.approx_kl > cfg.kl_limit {
                stats.stopped_early = true;
                break 'epochs;
            }
            let loss = tape.scalar_value(sur.loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("ppo surrogate {loss}")));
            }
            let grads = bound.gradients(&tape.backward(sur.loss)?);
            if !grads.all_finite() {
                return Err(Error::NonFiniteLoss("ppo policy gradient".into()));
            }
            optim.actor.step(params, &grads)?;
            let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
            let targets: Vec<f64> = samples.iter().map(|s| s.ret).collect();
            vl += critic.regression_step(&mut optim.critic, &rows, &targets)?;
            pl += loss;
            kl += sur.approx_kl;
            cf += sur.clip_fraction;
            count += 1;
        }
        stats.epochs_run += 1;
    }
    critic.soft_update_target(1.0);
    let n = count.max(1) as f64;
    stats.policy_loss = pl / n;
    stats.value_loss = vl / n;
    stats.approx_kl = kl / n;
    stats.clip_fraction = cf / n;
    Ok(stats)
}

#[cfg(test)]
mod tests;
