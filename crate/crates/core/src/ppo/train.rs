use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    gae_advantages, log_density, normalize_advantages, ppo_update, surrogate_loss, GaussianPolicy, PpoConfig, PpoOptim,
    PpoSample,
};
use crate::adgraph::{Bound, NodeId, ParamSet, Tape, Tensor};
use crate::cstr_env::{step, ControlInput, PlantState};
use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::mpc_layer::{policy_forward, OcpSpec};
use crate::shac::{regress, write_csv, Critic, CurveRow, EpisodeEnv, FeatureMap, RunningAverage, Scenario};

/// What the controller sees at one control step.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub state: PlantState,
    /// Price forecast over the controller horizon.
    pub prices: Vec<f64>,
}

/// The eNMPC policy with Gaussian exploration around its first control.
#[derive(Clone, Debug)]
pub struct KoopmanGaussian {
    /// Architecture and normalization; parameter values come from the bound set.
    pub model: KoopmanModel,
    pub spec: OcpSpec,
}

impl GaussianPolicy for KoopmanGaussian {
    type Obs = Observation;

    fn mean(&self, tape: &Tape, bound: &Bound, obs: &Observation) -> Result<NodeId> {
        let x = tape.constant(Tensor::vector(vec![obs.state.c, obs.state.temp]));
        let storage = tape.constant(Tensor::scalar(obs.state.storage));
        let p = tape.constant(Tensor::vector(obs.prices.clone()));
        Ok(policy_forward(tape, &self.model, bound, x, storage, p, &self.spec)?.u0)
    }
}

/// Samples of one rollout with advantages filled in (not yet normalized).
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub samples: Vec<PpoSample<Observation>>,
    /// Rewards per environment in step order.
    pub rewards: Vec<Vec<f64>>,
    pub violations: usize,
    pub aborted: usize,
}

impl Rollout {
    pub fn mean_reward(&self) -> f64 {
        let n: usize = self.rewards.iter().map(Vec::len).sum();
        self.rewards.iter().flatten().sum::<f64>() / n.max(1) as f64
    }
}

/// Steps every environment `steps` times with sampled controls on plain floats.
/// A controller or plant failure ends the episode, truncating the trajectory.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout(
    scenario: &Scenario,
    policy: &KoopmanGaussian,
    params: &ParamSet,
    critic: &Critic,
    envs: &mut [EpisodeEnv],
    steps: usize,
    std: &[f64],
    gamma: f64,
    lambda: f64,
) -> Rollout {
    let mut out = Rollout::default();
    for (i, env) in envs.iter_mut().enumerate() {
        let mut samples = Vec::with_capacity(steps);
        let (mut rewards, mut values, mut next_values, mut dones) = (vec![], vec![], vec![], vec![]);
        for _ in 0..steps {
            let obs = Observation {
                state: env.state,
                prices: env.forecast(scenario),
            };
            match env_step(scenario, policy, params, critic, env, &obs, std) {
                Ok((action, r, next_value, done, violated)) => {
                    let features = critic.features.plain(&obs.state, &obs.prices);
                    values.push(critic.value_of(&critic.params, &features));
                    let logp = log_density(&action.1, &action.0, std);
                    samples.push(PpoSample {
                        obs,
                        features,
                        action: action.1,
                        logp_old: logp,
                        advantage: 0.0,
                        ret: 0.0,
                    });
                    rewards.push(r);
                    next_values.push(next_value);
                    dones.push(done);
                    out.violations += violated as usize;
                }
                Err(e) => {
                    warn!("env {i}: step failed ({e}); starting a new episode");
                    if let Some(d) = dones.last_mut() {
                        *d = true;
                    }
                    env.new_episode(scenario);
                    out.aborted += 1;
                }
            }
        }
        let (adv, ret) = gae_advantages(&rewards, &values, &next_values, &dones, gamma, lambda);
        for ((s, a), g) in samples.iter_mut().zip(adv).zip(ret) {
            s.advantage = a;
            s.ret = g;
        }
        out.samples.extend(samples);
        out.rewards.push(rewards);
    }
    out
}

type StepOutcome = ((Vec<f64>, Vec<f64>), f64, f64, bool, bool);

fn env_step(
    sc: &Scenario,
    policy: &KoopmanGaussian,
    params: &ParamSet,
    critic: &Critic,
    env: &mut EpisodeEnv,
    obs: &Observation,
    std: &[f64],
) -> Result<StepOutcome> {
    let mean = policy.mean_value(params, obs)?;
    let action: Vec<f64> = mean
        .iter()
        .zip(std)
        .map(|(m, s)| m + Normal::new(0.0, *s).expect("finite std").sample(&mut env.rng))
        .collect();
    let [rb, fb] = sc.spec.control_bounds;
    let u = ControlInput {
        rho: rb.clamp(action[0]),
        flow: fb.clamp(action[1]),
    };
    let (next, reward, tr) = step(&sc.env, &sc.plant, &env.state, &u, env.price(sc))?;
    env.t += 1;
    env.state = next;
    let next_value = critic.value(&critic.params, &next, &env.forecast(sc));
    let done = env.at_episode_end(sc);
    if done {
        env.new_episode(sc);
    }
    Ok(((mean, action), reward.total, next_value, done, tr.violated()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoUpdateStats {
    pub update: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub epochs_run: usize,
    pub violation_rate: f64,
    pub aborted: usize,
}

pub struct PpoTrainer {
    pub scenario: Scenario,
    pub cfg: PpoConfig,
    pub policy: KoopmanGaussian,
    pub params: ParamSet,
    pub critic: Critic,
    pub optim: PpoOptim,
    pub envs: Vec<EpisodeEnv>,
    pub std: Vec<f64>,
    pub steps: usize,
    pub updates: usize,
    pub curve: Vec<CurveRow>,
    avg: RunningAverage,
    rng: ChaCha8Rng,
}

impl PpoTrainer {
    pub fn new(scenario: Scenario, model: KoopmanModel, cfg: PpoConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let features = FeatureMap::new(&scenario.env, &scenario.prices, scenario.spec.horizon());
        let critic = Critic::new(features, &cfg.critic_hidden, cfg.value_scale, &mut rng);
        let envs = (0..cfg.n_envs)
            .map(|_| EpisodeEnv::new(&scenario, rng.random()))
            .collect();
        let std = match &cfg.log_std {
            Some(ls) => ls.iter().map(|v| v.exp()).collect(),
            None => scenario.spec.sigma().to_vec(),
        };
        Ok(Self {
            params: model.params.clone(),
            policy: KoopmanGaussian {
                model,
                spec: scenario.spec.clone(),
            },
            optim: PpoOptim::new(&cfg),
            scenario,
            critic,
            envs,
            std,
            steps: 0,
            updates: 0,
            curve: Vec::new(),
            avg: RunningAverage::new(1024),
            rng,
            cfg,
        })
    }

    /// Current policy as a standalone model.
    pub fn model(&self) -> KoopmanModel {
        let mut m = self.policy.model.clone();
        m.params = self.params.clone();
        m
    }

    /// Rollout with normalized advantages.
    pub fn rollout(&mut self) -> Rollout {
        let mut r = collect_rollout(
            &self.scenario,
            &self.policy,
            &self.params,
            &self.critic,
            &mut self.envs,
            self.cfg.steps_per_env(),
            &self.std,
            self.cfg.gamma,
            self.cfg.lambda,
        );
        let mut adv: Vec<f64> = r.samples.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut adv);
        for (s, a) in r.samples.iter_mut().zip(adv) {
            s.advantage = a;
        }
        r
    }

    /// Regresses the critic onto the rollout's returns for the configured
    /// epochs without touching the policy. Returns the loss of the last pass.
    pub fn fit_critic(&mut self, rollout: &Rollout) -> Result<f64> {
        let rows: Vec<Vec<f64>> = rollout.samples.iter().map(|s| s.features.clone()).collect();
        let targets: Vec<f64> = rollout.samples.iter().map(|s| s.ret).collect();
        let minibatches = rows.len().div_ceil(self.cfg.minibatch).max(1);
        let losses = regress(
            &mut self.critic,
            &mut self.optim.critic,
            &rows,
            &targets,
            self.cfg.epochs,
            minibatches,
            &mut self.rng,
        )?;
        self.critic.soft_update_target(1.0);
        Ok(losses.last().copied().unwrap_or(f64::NAN))
    }

    /// Gradient of the clipped surrogate over the whole rollout at the current
    /// parameters, where every ratio is one.
    pub fn policy_gradient(&self, rollout: &Rollout) -> Result<ParamSet> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let refs: Vec<_> = rollout.samples.iter().collect();
        let sur = surrogate_loss(&tape, &bound, &self.policy, &refs, &self.std, self.cfg.clip)?;
        let grads = bound.gradients(&tape.backward(sur.loss)?);
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss("ppo policy gradient".into()));
        }
        Ok(grads)
    }

    pub fn update(&mut self) -> Result<PpoUpdateStats> {
        let rollout = self.rollout();
        let stats = ppo_update(
            &mut self.params,
            &self.policy,
            &mut self.critic,
            &rollout.samples,
            &self.std,
            &self.cfg,
            &mut self.optim,
            &mut self.rng,
        )?;
        self.record_curve(&rollout);
        let n = rollout.samples.len();
        let out = PpoUpdateStats {
            update: self.updates,
            steps: self.steps,
            mean_reward: if n == 0 { f64::NAN } else { rollout.mean_reward() },
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            epochs_run: stats.epochs_run,
            violation_rate: rollout.violations as f64 / n.max(1) as f64,
            aborted: rollout.aborted,
        };
        self.updates += 1;
        Ok(out)
    }

    fn record_curve(&mut self, rollout: &Rollout) {
        let len = rollout.rewards.iter().map(Vec::len).max().unwrap_or(0);
        for k in 0..len {
            let rewards: Vec<f64> = rollout.rewards.iter().filter_map(|r| r.get(k).copied()).collect();
            for &r in &rewards {
                self.avg.push(r);
            }
            self.steps += self.cfg.n_envs;
            self.curve.push(CurveRow {
                update: self.updates,
                steps: self.steps,
                mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
                run_avg_1024: self.avg.mean(),
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct PpoRun {
    pub curve: Vec<CurveRow>,
    pub updates: Vec<PpoUpdateStats>,
    pub best_update: usize,
    pub best_model: KoopmanModel,
    pub final_model: KoopmanModel,
    pub critic: Critic,
}

/// Trains for `ceil(total_steps / rollout)` updates, writing the same files as
/// the short-horizon trainer when `out` is set.
pub fn train(scenario: Scenario, model: KoopmanModel, cfg: &PpoConfig, out: Option<&Path>) -> Result<PpoRun> {
    let n_updates = cfg.total_steps.div_ceil(cfg.steps_per_env() * cfg.n_envs);
    let mut trainer = PpoTrainer::new(scenario, model, cfg.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut updates = Vec::with_capacity(n_updates);
    let mut best: Option<(f64, usize, KoopmanModel)> = None;
    for u in 0..n_updates {
        let used = trainer.model();
        let stats = trainer.update()?;
        if let Some(dir) = out {
            used.save(&dir.join("checkpoints").join(format!("update_{u:05}.ckpt")))?;
        }
        if stats.mean_reward.is_finite() && best.as_ref().is_none_or(|b| stats.mean_reward > b.0) {
            best = Some((stats.mean_reward, u, used));
        }
        info!(
            "ppo update {u}/{n_updates}: reward {:.4} kl {:.4} epochs {} viol {:.3}",
            stats.mean_reward, stats.approx_kl, stats.epochs_run, stats.violation_rate
        );
        updates.push(stats);
    }
    let (_, best_update, best_model) =
        best.ok_or_else(|| Error::Invalid("no update produced a finite reward".into()))?;
    let run = PpoRun {
        curve: std::mem::take(&mut trainer.curve),
        updates,
        best_update,
        best_model,
        final_model: trainer.model(),
        critic: trainer.critic,
    };
    if let Some(dir) = out {
        write_csv(&dir.join("learning_curve.csv"), &run.curve)?;
        write_csv(&dir.join("updates.csv"), &run.updates)?;
        run.best_model.save(&dir.join("best.ckpt"))?;
        run.final_model.save(&dir.join("final.ckpt"))?;
        run.critic.save(&dir.join("critic.ckpt"))?;
        let meta = json!({ "best_update": run.best_update, "updates": run.updates.len() });
        fs::write(dir.join("best.json"), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(run)
}
