use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    actor_loss, collect_short_rollout, critic_update, Critic, CriticFit, EpisodeEnv, FeatureMap,
    RolloutBuffer, Scenario, ShacConfig,
};
use crate::adgraph::{checkpoint, Adam, ParamSet, Tape};
use crate::error::{Error, GraphError, Result};
use crate::koopman::KoopmanModel;

/// Mean of the last `capacity` pushed values.
#[derive(Clone, Debug)]
pub struct RunningAverage {
    capacity: usize,
    values: VecDeque<f64>,
}

impl RunningAverage {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            values: VecDeque::new(),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// One learning-curve row per vectorized environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub run_avg_1024: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub steps: usize,
    pub horizon: usize,
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub violation_rate: f64,
    pub aborted: usize,
}

/// Trainer state: policy, critic, optimizers and the environment pool.
pub struct ShacTrainer {
    pub scenario: Scenario,
    pub cfg: ShacConfig,
    pub model: KoopmanModel,
    pub critic: Critic,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub envs: Vec<EpisodeEnv>,
    pub steps: usize,
    pub updates: usize,
    pub curve: Vec<CurveRow>,
    avg: RunningAverage,
    rng: ChaCha8Rng,
}

impl ShacTrainer {
    pub fn new(scenario: Scenario, model: KoopmanModel, cfg: ShacConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let features = FeatureMap::new(&scenario.env, &scenario.prices, scenario.spec.horizon());
        let critic = Critic::new(features, &cfg.critic_hidden, cfg.value_scale, &mut rng);
        let envs = (0..cfg.n_envs)
            .map(|_| EpisodeEnv::new(&scenario, rng.random()))
            .collect();
        Ok(Self {
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
            scenario,
            model,
            critic,
            envs,
            steps: 0,
            updates: 0,
            curve: Vec::new(),
            avg: RunningAverage::new(1024),
            rng,
            cfg,
        })
    }

    /// Collects one window on a fresh tape and differentiates the actor loss.
    /// Returns `None` for the gradient when every environment aborted.
    pub fn actor_gradient(&mut self, h: usize) -> Result<(Option<(ParamSet, f64)>, RolloutBuffer)> {
        let tape = Tape::new();
        let bound = self.model.params.bind(&tape);
        let buffer = collect_short_rollout(
            &tape,
            &self.scenario,
            &self.model,
            &bound,
            &self.critic,
            &mut self.envs,
            h,
            self.cfg.explore,
        );
        if buffer.windows.is_empty() {
            return Ok((None, buffer));
        }
        let loss = actor_loss(&tape, &buffer, &self.critic, self.cfg.gamma)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(format!("actor loss {value}")));
        }
        let grads = bound.gradients(&tape.backward(loss)?);
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss("actor gradient".into()));
        }
        Ok((Some((grads, value)), buffer))
    }

    pub fn fit_critic(&mut self, buffer: &RolloutBuffer) -> Result<f64> {
        let fit = CriticFit::from(&self.cfg);
        let losses = critic_update(&mut self.critic, &mut self.critic_opt, buffer, &fit, &mut self.rng)?;
        Ok(losses.last().copied().unwrap_or(f64::NAN))
    }

    /// Rollout, actor step and critic fit. A non-finite loss is retried once
    /// from the same environment states with half the window.
    pub fn update(&mut self) -> Result<UpdateStats> {
        let snapshot = self.envs.clone();
        let mut h = self.cfg.horizon;
        let (grad, buffer) = match self.actor_gradient(h) {
            Err(first) if is_non_finite(&first) => {
                self.envs = snapshot;
                h = (h / 2).max(1);
                warn!("update {}: {first}; retrying with h = {h}", self.updates);
                self.actor_gradient(h).map_err(|e| {
                    Error::NonFiniteLoss(format!(
                        "update {} at step {}: {first}; retry with h = {h} failed: {e}",
                        self.updates, self.steps
                    ))
                })?
            }
            other => other?,
        };
        let mut actor = f64::NAN;
        if let Some((g, loss)) = grad {
            self.actor_opt.step(&mut self.model.params, &g)?;
            actor = loss;
        }
        let critic = if buffer.windows.is_empty() {
            f64::NAN
        } else {
            self.fit_critic(&buffer)?
        };
        self.record_curve(&buffer, h);
        let n = buffer.transitions();
        let violations = buffer.windows.iter().flat_map(|w| &w.steps).filter(|s| s.violated).count();
        let stats = UpdateStats {
            update: self.updates,
            steps: self.steps,
            horizon: h,
            mean_reward: if n == 0 { f64::NAN } else { buffer.mean_reward() },
            actor_loss: actor,
            critic_loss: critic,
            violation_rate: violations as f64 / n.max(1) as f64,
            aborted: buffer.aborted,
        };
        self.updates += 1;
        Ok(stats)
    }

    fn record_curve(&mut self, buffer: &RolloutBuffer, h: usize) {
        for k in 0..h {
            let rewards: Vec<f64> = buffer
                .windows
                .iter()
                .filter_map(|w| w.steps.get(k).map(|s| s.reward_value))
                .collect();
            for &r in &rewards {
                self.avg.push(r);
            }
            self.steps += self.cfg.n_envs;
            let mean = if rewards.is_empty() {
                f64::NAN
            } else {
                rewards.iter().sum::<f64>() / rewards.len() as f64
            };
            self.curve.push(CurveRow {
                update: self.updates,
                steps: self.steps,
                mean_reward: mean,
                run_avg_1024: self.avg.mean(),
            });
        }
    }
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFiniteLoss(_) | Error::Graph(GraphError::NonFiniteGradient(_)))
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct ShacRun {
    pub curve: Vec<CurveRow>,
    pub updates: Vec<UpdateStats>,
    /// Update whose rollout had the highest mean reward.
    pub best_update: usize,
    /// Policy parameters used in that rollout.
    pub best_model: KoopmanModel,
    pub final_model: KoopmanModel,
    pub critic: Critic,
}

/// Trains for `ceil(total_steps / (N·h))` updates. With `out` set, the policy
/// used by every update is written to `out/checkpoints/update_XXXXX.ckpt`, and
/// the learning curve, per-update statistics, best and final policies and the
/// critic are written next to it.
pub fn train(scenario: Scenario, model: KoopmanModel, cfg: &ShacConfig, out: Option<&Path>) -> Result<ShacRun> {
    let n_updates = cfg.total_steps.div_ceil(cfg.steps_per_update());
    let mut trainer = ShacTrainer::new(scenario, model, cfg.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut updates = Vec::with_capacity(n_updates);
    let mut best: Option<(f64, usize, KoopmanModel)> = None;
    for u in 0..n_updates {
        let used = trainer.model.clone();
        let stats = trainer.update()?;
        if let Some(dir) = out {
            used.save(&dir.join("checkpoints").join(format!("update_{u:05}.ckpt")))?;
        }
        if stats.mean_reward.is_finite() && best.as_ref().is_none_or(|b| stats.mean_reward > b.0) {
            best = Some((stats.mean_reward, u, used));
        }
        if u % 10 == 0 || u + 1 == n_updates {
            info!(
                "update {u}/{n_updates}: reward {:.4} run-avg {:.4} actor {:.4} critic {:.3e} viol {:.3}",
                stats.mean_reward,
                trainer.curve.last().map_or(f64::NAN, |r| r.run_avg_1024),
                stats.actor_loss,
                stats.critic_loss,
                stats.violation_rate
            );
        }
        updates.push(stats);
    }
    let (_, best_update, best_model) =
        best.ok_or_else(|| Error::Invalid("no update produced a finite reward".into()))?;
    let run = ShacRun {
        curve: trainer.curve,
        updates,
        best_update,
        best_model,
        final_model: trainer.model,
        critic: trainer.critic,
    };
    if let Some(dir) = out {
        write_outputs(dir, &run)?;
    }
    Ok(run)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_outputs(dir: &Path, run: &ShacRun) -> Result<()> {
    write_csv(&dir.join("learning_curve.csv"), &run.curve)?;
    write_csv(&dir.join("updates.csv"), &run.updates)?;
    run.best_model.save(&dir.join("best.ckpt"))?;
    run.final_model.save(&dir.join("final.ckpt"))?;
    run.critic.save(&dir.join("critic.ckpt"))?;
    let meta = json!({ "best_update": run.best_update, "updates": run.updates.len() });
    fs::write(dir.join("best.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

impl Critic {
    /// Online and target parameters (the latter under `target/`) plus the
    /// network description as metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.params.clone();
        for (n, t) in self.target.iter() {
            tensors.insert(&format!("target/{n}"), t.clone());
        }
        let meta = json!({
            "kind": "critic",
            "net": self.net,
            "features": self.features,
            "value_scale": self.value_scale,
        });
        checkpoint::save(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = checkpoint::load(path)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        let mut params = ParamSet::new();
        let mut target = ParamSet::new();
        for (n, t) in tensors.iter() {
            match n.strip_prefix("target/") {
                Some(rest) => target.insert(rest, t.clone()),
                None => params.insert(n, t.clone()),
            }
        }
        Ok(Self {
            net: serde_json::from_value(field("net")?)?,
            features: serde_json::from_value(field("features")?)?,
            value_scale: serde_json::from_value(field("value_scale")?)?,
            params,
            target,
        })
    }
}
