//! Short-horizon actor-critic: rewards are backpropagated through the plant
//! and the QP policy over windows of `h` control steps, and a learned critic
//! values the state at the end of each window.

mod critic;
mod episodes;
mod train;

pub use critic::{Critic, FeatureMap};
pub use episodes::{EpisodeEnv, Scenario};
pub use train::{train, CurveRow, RunningAverage, ShacRun, ShacTrainer, UpdateStats};
pub(crate) use train::write_csv;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adgraph::{Adam, Bound, NodeId, Real, Tape, Tensor, Var};
use crate::cstr_env::advance;
use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::mpc_layer::policy_forward;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShacConfig {
    /// Window length in control steps.
    pub horizon: usize,
    pub n_envs: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Target-critic mixing factor.
    pub tau: f64,
    /// Environment steps over all parallel environments.
    pub total_steps: usize,
    pub critic_hidden: Vec<usize>,
    /// Passes over the window data per critic update.
    pub critic_iterations: usize,
    pub critic_minibatches: usize,
    pub value_scale: f64,
    /// Add Gaussian exploration noise to the applied controls.
    pub explore: bool,
    pub seed: u64,
}

impl Default for ShacConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            n_envs: 8,
            gamma: 0.99,
            lambda: 0.95,
            actor_lr: 1e-5,
            critic_lr: 1e-3,
            tau: 0.2,
            total_steps: 200_000,
            critic_hidden: vec![64, 64],
            critic_iterations: 16,
            critic_minibatches: 4,
            value_scale: 100.0,
            explore: true,
            seed: 0,
        }
    }
}

impl ShacConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, msg: &str| Error::Config {
            path: format!("shac.{path}"),
            msg: msg.into(),
        };
        if !(1..=64).contains(&self.horizon) {
            return Err(err("horizon", "must be in [1, 64]"));
        }
        if self.n_envs == 0 {
            return Err(err("n_envs", "must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(err("gamma", "must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(err("lambda", "must be in [0, 1]"));
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return Err(err("actor_lr", "learning rates must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(err("tau", "must be in [0, 1]"));
        }
        if self.critic_iterations == 0 || self.critic_minibatches == 0 {
            return Err(err("critic_iterations", "must be >= 1"));
        }
        if !(self.value_scale > 0.0) {
            return Err(err("value_scale", "must be > 0"));
        }
        Ok(())
    }

    pub fn steps_per_update(&self) -> usize {
        self.horizon * self.n_envs
    }
}

/// One control step of one environment.
#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Critic features of the state the step started from.
    pub features: Vec<f64>,
    /// Applied control (2,).
    pub action: NodeId,
    pub reward: NodeId,
    pub reward_value: f64,
    /// Plant state after the step (c, T, storage), before any episode reset.
    pub next: [NodeId; 3],
    pub next_prices: Vec<f64>,
    /// Target-critic value of the next state.
    pub next_value: f64,
    /// Last step of an episode.
    pub done: bool,
    pub violated: bool,
}

/// Steps of one environment within one window.
#[derive(Clone, Debug)]
pub struct EnvWindow {
    pub env: usize,
    pub steps: Vec<StepRecord>,
}

/// Differentiable record of one window over all environments. Windows of
/// environments that failed are dropped and counted in `aborted`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub windows: Vec<EnvWindow>,
    pub aborted: usize,
}

impl RolloutBuffer {
    pub fn transitions(&self) -> usize {
        self.windows.iter().map(|w| w.steps.len()).sum()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.windows.iter().flat_map(|w| w.steps.iter().map(|s| s.reward_value))
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards().sum::<f64>() / self.transitions().max(1) as f64
    }
}

/// Runs `h` steps of every environment on `tape`. Window start states enter as
/// constants, so nothing recorded here depends on earlier windows.
#[allow(clippy::too_many_arguments)]
pub fn collect_short_rollout(
    tape: &Tape,
    scenario: &Scenario,
    model: &KoopmanModel,
    bound: &Bound,
    critic: &Critic,
    envs: &mut [EpisodeEnv],
    h: usize,
    explore: bool,
) -> RolloutBuffer {
    let mut buffer = RolloutBuffer {
        horizon: h,
        ..RolloutBuffer::default()
    };
    for (i, env) in envs.iter_mut().enumerate() {
        match env_window(tape, scenario, model, bound, critic, env, h, explore) {
            Ok(steps) => buffer.windows.push(EnvWindow { env: i, steps }),
            Err(e) => {
                warn!("env {i}: window aborted ({e}); starting a new episode");
                env.new_episode(scenario);
                buffer.aborted += 1;
            }
        }
    }
    buffer
}

#[allow(clippy::too_many_arguments)]
fn env_window(
    tape: &Tape,
    sc: &Scenario,
    model: &KoopmanModel,
    bound: &Bound,
    critic: &Critic,
    env: &mut EpisodeEnv,
    h: usize,
    explore: bool,
) -> Result<Vec<StepRecord>> {
    let sigma = if explore { sc.spec.sigma() } else { [0.0; 2] };
    let constants = |env: &EpisodeEnv| env.state.as_array().map(|v| Var::constant(tape, v));
    let mut state = constants(env);
    let mut steps = Vec::with_capacity(h);
    for _ in 0..h {
        let forecast = env.forecast(sc);
        let features = critic.features.plain(&env.state, &forecast);
        let x = tape.concat(&[state[0].id, state[1].id], 0)?;
        let p = tape.constant(Tensor::vector(forecast));
        let out = policy_forward(tape, model, bound, x, state[2].id, p, &sc.spec)?;
        let mut applied = [out.u0; 2];
        for (ch, (s, b)) in sigma.iter().zip(sc.spec.control_bounds).enumerate() {
            let noise = if *s > 0.0 {
                Normal::new(0.0, *s).expect("finite std").sample(&mut env.rng)
            } else {
                0.0
            };
            let mean = tape.element(out.u0, ch)?;
            applied[ch] = tape.clamp(tape.add_const(mean, noise), b.lo, b.hi);
        }
        let action = tape.concat(&applied, 0)?;
        let u = [
            Var::new(tape, tape.element(action, 0)?),
            Var::new(tape, tape.element(action, 1)?),
        ];
        let tr = advance(&sc.env, &sc.plant, state, u, env.price(sc), sc.env.substeps)?;
        env.t += 1;
        env.state = tr.next_state();
        let next_prices = env.forecast(sc);
        let done = env.at_episode_end(sc);
        steps.push(StepRecord {
            features,
            action,
            reward: tr.reward.total.id,
            reward_value: tr.reward.total.value(),
            next: tr.next.map(|v| v.id),
            next_value: critic.value(&critic.target, &env.state, &next_prices),
            next_prices,
            done,
            violated: tr.violated(),
        });
        if done {
            env.new_episode(sc);
            state = constants(env);
        } else {
            state = tr.next;
        }
    }
    Ok(steps)
}

/// Negative mean discounted window return with the target critic valuing the
/// window end:
/// `−1/(N·h) Σ_envs [Σ_t γᵗ r_{t+1} + γʰ V(x_h)]`.
///
/// When an episode ends inside a window, its final state is valued at that
/// point and discounting restarts for the next episode.
pub fn actor_loss(tape: &Tape, buffer: &RolloutBuffer, critic: &Critic, gamma: f64) -> Result<NodeId> {
    if buffer.windows.is_empty() {
        return Err(Error::Invalid("no complete environment window in the buffer".into()));
    }
    let target = critic.target.bind_const(tape);
    let mut terms = Vec::new();
    for w in &buffer.windows {
        let mut disc = 1.0;
        for (k, s) in w.steps.iter().enumerate() {
            terms.push(tape.scale(s.reward, disc));
            disc *= gamma;
            if s.done || k + 1 == w.steps.len() {
                let f = critic.features.on_tape(tape, s.next, &s.next_prices)?;
                let v = critic.value_on_tape(tape, &target, f)?;
                terms.push(tape.scale(v, disc));
                disc = 1.0;
            }
        }
    }
    let total = tape.sum(tape.concat(&terms, 0)?);
    let n = (buffer.windows.len() * buffer.horizon).max(1) as f64;
    Ok(tape.scale(total, -1.0 / n))
}

/// TD(λ) targets of one window:
/// `G_t = r_t + γ[(1 − λ) V(x_{t+1}) + λ G_{t+1}]`, bootstrapped with `V` at
/// the window end and at episode ends.
pub fn td_lambda_targets(rewards: &[f64], next_values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let tail = if dones[t] || t + 1 == n {
            next_values[t]
        } else {
            (1.0 - lambda) * next_values[t] + lambda * next
        };
        out[t] = rewards[t] + gamma * tail;
        next = out[t];
    }
    out
}

/// Settings of one critic regression round.
#[derive(Clone, Copy, Debug)]
pub struct CriticFit {
    pub gamma: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub minibatches: usize,
    pub tau: f64,
}

impl From<&ShacConfig> for CriticFit {
    fn from(c: &ShacConfig) -> Self {
        Self {
            gamma: c.gamma,
            lambda: c.lambda,
            iterations: c.critic_iterations,
            minibatches: c.critic_minibatches,
            tau: c.tau,
        }
    }
}

/// Feature rows and TD(λ) targets of every recorded step.
pub fn critic_dataset(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for w in &buffer.windows {
        let r: Vec<f64> = w.steps.iter().map(|s| s.reward_value).collect();
        let v: Vec<f64> = w.steps.iter().map(|s| s.next_value).collect();
        let d: Vec<bool> = w.steps.iter().map(|s| s.done).collect();
        targets.extend(td_lambda_targets(&r, &v, &d, gamma, lambda));
        rows.extend(w.steps.iter().map(|s| s.features.clone()));
    }
    (rows, targets)
}

/// Regresses the online critic onto TD(λ) targets in shuffled minibatches,
/// then soft-updates the target critic. Returns the mean loss of each pass.
pub fn critic_update(
    critic: &mut Critic,
    adam: &mut Adam,
    buffer: &RolloutBuffer,
    fit: &CriticFit,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (rows, targets) = critic_dataset(buffer, fit.gamma, fit.lambda);
    let losses = regress(critic, adam, &rows, &targets, fit.iterations, fit.minibatches, rng)?;
    critic.soft_update_target(fit.tau);
    Ok(losses)
}

pub(crate) fn regress(
    critic: &mut Critic,
    adam: &mut Adam,
    rows: &[Vec<f64>],
    targets: &[f64],
    iterations: usize,
    minibatches: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let size = rows.len().div_ceil(minibatches);
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(size) {
            let x: Vec<&[f64]> = chunk.iter().map(|&i| rows[i].as_slice()).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            sum += critic.regression_step(adam, &x, &y)? * chunk.len() as f64;
            count += chunk.len();
        }
        losses.push(sum / count as f64);
    }
    Ok(losses)
}
