use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::Normalizer;
use crate::adgraph::{checkpoint, ParamSet, Tensor};
use crate::cstr_env::{advance, reset, EnvConfig, PlantParams, ResetMode};
use crate::error::{Error, Result};
use crate::par::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_traj: usize,
    pub n_train: usize,
    pub days: f64,
    /// Sampling interval in minutes.
    pub dt_minutes: f64,
    /// RK4 substeps per sampling interval.
    pub substeps: usize,
    /// Inputs are held for a uniform random duration in this range (hours).
    pub hold_hours: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_traj: 84,
            n_train: 63,
            days: 5.0,
            dt_minutes: 15.0,
            substeps: 4,
            hold_hours: (1.0, 4.0),
        }
    }
}

impl DatasetConfig {
    pub fn steps(&self) -> usize {
        (self.days * 24.0 * 60.0 / self.dt_minutes).round() as usize
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_minutes / 60.0
    }
}

/// One simulated trajectory: `states[k]` is sampled at time k·dt and
/// `inputs[k]` is applied on `[k·dt, (k+1)·dt)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<[f64; 2]>,
    pub inputs: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub config: DatasetConfig,
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    /// Statistics of the training split only.
    pub norm: Normalizer,
    pub seeds: Vec<u64>,
}

fn simulate(
    env: &EnvConfig,
    plant: &PlantParams,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = cfg.dt_hours();
    let step_env = EnvConfig {
        dt_ctrl: dt,
        ..env.clone()
    };
    let s0 = reset(env, ResetMode::Randomized, &mut rng);
    let mut x = [s0.c, s0.temp];
    let n = cfg.steps();
    let mut states = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    let mut held = [env.steady.rho, env.steady.flow];
    let mut remaining = 0usize;
    for _ in 0..n {
        if remaining == 0 {
            held = [
                rng.random_range(env.rho_bounds.lo..=env.rho_bounds.hi),
                rng.random_range(env.flow_bounds.lo..=env.flow_bounds.hi),
            ];
            let hours = rng.random_range(cfg.hold_hours.0..=cfg.hold_hours.1);
            remaining = ((hours / dt).round() as usize).max(1);
        }
        remaining -= 1;
        states.push(x);
        inputs.push(held);
        let tr = advance(&step_env, plant, [x[0], x[1], 0.0], held, 0.0, cfg.substeps)?;
        x = [tr.next[0], tr.next[1]];
    }
    Ok(Trajectory { states, inputs })
}

fn stats(values: impl Iterator<Item = [f64; 2]>) -> ([f64; 2], [f64; 2]) {
    let mut n = 0.0;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for v in values {
        n += 1.0;
        for i in 0..2 {
            sum[i] += v[i];
            sq[i] += v[i] * v[i];
        }
    }
    let mean = [sum[0] / n, sum[1] / n];
    let std = [0, 1].map(|i| (sq[i] / n - mean[i] * mean[i]).max(0.0).sqrt().max(1e-12));
    (mean, std)
}

/// Simulates `n_traj` trajectories from randomized initial states under
/// piecewise-constant random inputs. Trajectory seeds are drawn up front so the
/// result does not depend on the worker count; a diverging trajectory is
/// regenerated with a fresh seed from `rng`.
pub fn generate_dataset(
    env: &EnvConfig,
    plant: &PlantParams,
    cfg: &DatasetConfig,
    rng: &mut impl Rng,
) -> Result<TrajectoryDataset> {
    if cfg.n_train == 0 || cfg.n_train >= cfg.n_traj {
        return Err(Error::Config {
            path: "dataset.n_train".into(),
            msg: format!("must be in 1..{}", cfg.n_traj),
        });
    }
    let mut seeds: Vec<u64> = (0..cfg.n_traj).map(|_| rng.random()).collect();
    let first = par_map(&seeds, |&seed| simulate(env, plant, cfg, seed));
    let mut trajs = Vec::with_capacity(cfg.n_traj);
    for (seed, result) in seeds.iter_mut().zip(first) {
        let mut result = result;
        let mut attempts = 0;
        loop {
            match result {
                Ok(t) => {
                    trajs.push(t);
                    break;
                }
                Err(e) if attempts < 10 => {
                    warn!("trajectory seed {seed} failed ({e}); regenerating");
                    *seed = rng.random();
                    attempts += 1;
                    result = simulate(env, plant, cfg, *seed);
                }
                Err(e) => return Err(e),
            }
        }
    }
    let validation = trajs.split_off(cfg.n_train);
    let train = trajs;
    let (state_mean, state_scale) = stats(train.iter().flat_map(|t| t.states.iter().copied()));
    let (input_mean, input_scale) = stats(train.iter().flat_map(|t| t.inputs.iter().copied()));
    Ok(TrajectoryDataset {
        config: cfg.clone(),
        train,
        validation,
        norm: Normalizer {
            state_mean,
            state_scale,
            input_mean,
            input_scale,
        },
        seeds,
    })
}

impl TrajectoryDataset {
    pub fn steps(&self) -> usize {
        self.train.first().map_or(0, |t| t.states.len())
    }

    pub fn all(&self) -> impl Iterator<Item = &Trajectory> {
        self.train.iter().chain(&self.validation)
    }

    fn pack(trajs: &[Trajectory], field: impl Fn(&Trajectory) -> &Vec<[f64; 2]>) -> Tensor {
        let steps = trajs.first().map_or(0, |t| field(t).len());
        let data: Vec<f64> = trajs
            .iter()
            .flat_map(|t| field(t).iter().flat_map(|v| v.iter().copied()))
            .collect();
        Tensor::new(vec![trajs.len(), steps, 2], data).expect("packed shape")
    }

    fn unpack(t: &Tensor) -> Result<Vec<Vec<[f64; 2]>>> {
        let [n, steps, 2] = t.shape() else {
            return Err(Error::Checkpoint(format!("bad dataset tensor shape {:?}", t.shape())));
        };
        Ok((0..*n)
            .map(|i| {
                (0..*steps)
                    .map(|k| {
                        let o = (i * steps + k) * 2;
                        [t.data()[o], t.data()[o + 1]]
                    })
                    .collect()
            })
            .collect())
    }

    /// Persists the trajectories as named tensors plus JSON metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut set = ParamSet::new();
        set.insert("train.states", Self::pack(&self.train, |t| &t.states));
        set.insert("train.inputs", Self::pack(&self.train, |t| &t.inputs));
        set.insert("validation.states", Self::pack(&self.validation, |t| &t.states));
        set.insert("validation.inputs", Self::pack(&self.validation, |t| &t.inputs));
        let meta = json!({
            "kind": "dataset",
            "config": self.config,
            "norm": self.norm,
            "seeds": self.seeds,
        });
        checkpoint::save(path, &set, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (set, meta) = checkpoint::load(path)?;
        let get = |name: &str| {
            set.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let zip = |s: Vec<Vec<[f64; 2]>>, u: Vec<Vec<[f64; 2]>>| -> Vec<Trajectory> {
            s.into_iter()
                .zip(u)
                .map(|(states, inputs)| Trajectory { states, inputs })
                .collect()
        };
        Ok(Self {
            config: serde_json::from_value(meta["config"].clone())?,
            norm: serde_json::from_value(meta["norm"].clone())?,
            seeds: serde_json::from_value(meta["seeds"].clone())?,
            train: zip(Self::unpack(get("train.states")?)?, Self::unpack(get("train.inputs")?)?),
            validation: zip(
                Self::unpack(get("validation.states")?)?,
                Self::unpack(get("validation.inputs")?)?,
            ),
        })
    }
}
