use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{KoopmanConfig, KoopmanModel, Normalizer, Trajectory, TrajectoryDataset};
use crate::adgraph::{Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::par::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Prediction horizon of each training window, in model steps.
    pub horizon: usize,
    /// Gradient steps per epoch; `None` means one pass over all training windows.
    pub batches_per_epoch: Option<usize>,
    pub model: KoopmanConfig,
}

impl Default for SiConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            epochs: 200,
            patience: 20,
            horizon: 12,
            batches_per_epoch: None,
            model: KoopmanConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiReport {
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Window starts `(trajectory, offset)` such that `offset + horizon` is a valid state index.
fn windows(trajs: &[Trajectory], horizon: usize, stride: usize) -> Vec<(usize, usize)> {
    trajs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let last = t.states.len().saturating_sub(horizon);
            (0..last).step_by(stride.max(1)).map(move |k| (i, k))
        })
        .collect()
}

/// Mean squared normalized prediction error of the windows, computed on plain
/// floats. Each window is encoded at its first state only.
pub fn window_loss(
    model: &KoopmanModel,
    trajs: &[Trajectory],
    horizon: usize,
    stride: usize,
) -> f64 {
    let norm = &model.norm;
    let wins = windows(trajs, horizon, stride);
    let mut total = 0.0;
    for &(i, k) in &wins {
        let t = &trajs[i];
        let controls: Vec<[f64; 2]> = t.inputs[k..k + horizon].iter().map(|&u| norm.input(u)).collect();
        let pred = model.rollout_plain(norm.state(t.states[k]), &controls);
        for (j, p) in pred.iter().enumerate() {
            let x = norm.state(t.states[k + j + 1]);
            total += (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2);
        }
    }
    total / (wins.len() * horizon * 2).max(1) as f64
}

/// Per-channel RMSE in physical units over every predicted step of every
/// `horizon`-step window.
pub fn multi_step_rmse(model: &KoopmanModel, trajs: &[Trajectory], horizon: usize) -> [f64; 2] {
    let norm = &model.norm;
    let mut sq = [0.0; 2];
    let mut n = 0usize;
    for (i, k) in windows(trajs, horizon, 1) {
        let t = &trajs[i];
        let controls: Vec<[f64; 2]> = t.inputs[k..k + horizon].iter().map(|&u| norm.input(u)).collect();
        for (j, p) in model.rollout_plain(norm.state(t.states[k]), &controls).iter().enumerate() {
            let p = norm.state_inv(*p);
            let x = t.states[k + j + 1];
            sq[0] += (p[0] - x[0]).powi(2);
            sq[1] += (p[1] - x[1]).powi(2);
            n += 1;
        }
    }
    sq.map(|s| (s / n.max(1) as f64).sqrt())
}

/// RMSE of predicting every state by the training mean, over the same points
/// as [`multi_step_rmse`].
pub fn mean_predictor_rmse(norm: &Normalizer, trajs: &[Trajectory], horizon: usize) -> [f64; 2] {
    let mut sq = [0.0; 2];
    let mut n = 0usize;
    for (i, k) in windows(trajs, horizon, 1) {
        for x in &trajs[i].states[k + 1..=k + horizon] {
            sq[0] += (x[0] - norm.state_mean[0]).powi(2);
            sq[1] += (x[1] - norm.state_mean[1]).powi(2);
            n += 1;
        }
    }
    sq.map(|s| (s / n.max(1) as f64).sqrt())
}

fn pack_rows(rows: impl Iterator<Item = [f64; 2]>) -> Tensor {
    let data: Vec<f64> = rows.flat_map(|r| r.into_iter()).collect();
    let n = data.len() / 2;
    Tensor::matrix(n, 2, data)
}

/// One Adam step on a batch of windows; returns the batch loss.
fn train_batch(
    model: &mut KoopmanModel,
    adam: &mut Adam,
    trajs: &[Trajectory],
    batch: &[(usize, usize)],
    horizon: usize,
) -> Result<f64> {
    let norm = model.norm;
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let x0 = tape.input(pack_rows(batch.iter().map(|&(i, k)| norm.state(trajs[i].states[k]))));
    let controls: Vec<_> = (0..horizon)
        .map(|j| {
            tape.input(pack_rows(
                batch.iter().map(|&(i, k)| norm.input(trajs[i].inputs[k + j])),
            ))
        })
        .collect();
    let preds = model.rollout_batch(&tape, &bound, x0, &controls)?;
    let mut terms = Vec::with_capacity(horizon);
    for (j, &p) in preds.iter().enumerate() {
        let target = pack_rows(batch.iter().map(|&(i, k)| norm.state(trajs[i].states[k + j + 1])));
        let err = tape.offset(p, &target.scaled(-1.0))?;
        terms.push(tape.mean(tape.square(err)));
    }
    let stacked = tape.concat(&terms, 0)?;
    let loss = tape.mean(stacked);
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("SI batch loss {value}")));
    }
    let grads = bound.gradients(&tape.backward(loss)?);
    adam.step(&mut model.params, &grads)?;
    Ok(value)
}

/// Trains one model by multi-step prediction error with Adam and early stopping
/// on the validation loss. Returns the parameters of the best validation epoch.
pub fn train_si(
    dataset: &TrajectoryDataset,
    cfg: &SiConfig,
    seed: u64,
) -> Result<(KoopmanModel, SiReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = KoopmanModel::new(cfg.model.clone(), dataset.norm, &mut rng);
    let train_states: Vec<[f64; 2]> = dataset
        .train
        .iter()
        .flat_map(|t| t.states.iter().map(|&x| dataset.norm.state(x)))
        .collect();
    model.fit_decoder(&train_states);
    let mut adam = Adam::new(cfg.lr);
    let mut wins = windows(&dataset.train, cfg.horizon, 1);
    if wins.is_empty() {
        return Err(Error::Invalid("no training windows".into()));
    }
    let per_epoch = cfg
        .batches_per_epoch
        .unwrap_or_else(|| wins.len().div_ceil(cfg.batch));
    let mut report = SiReport {
        seed,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
    };
    let mut best = model.clone();
    let mut cursor = wins.len();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            if cursor + cfg.batch > wins.len() {
                wins.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = &wins[cursor..(cursor + cfg.batch).min(wins.len())];
            cursor += cfg.batch;
            sum += train_batch(&mut model, &mut adam, &dataset.train, batch, cfg.horizon)?;
        }
        model.check_finite()?;
        let val = window_loss(&model, &dataset.validation, cfg.horizon, 1);
        report.train_loss.push(sum / per_epoch as f64);
        report.val_loss.push(val);
        if val < report.best_val {
            report.best_val = val;
            report.best_epoch = epoch;
            best = model.clone();
        } else if epoch - report.best_epoch >= cfg.patience {
            break;
        }
    }
    info!(
        "SI seed {seed}: best validation loss {:.3e} at epoch {}",
        report.best_val, report.best_epoch
    );
    Ok((best, report))
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub model: KoopmanModel,
    pub best: usize,
    pub reports: Vec<SiReport>,
}

/// Trains one model per seed and keeps the one with the lowest validation loss.
pub fn seed_sweep(dataset: &TrajectoryDataset, cfg: &SiConfig, seeds: &[u64]) -> Result<SweepResult> {
    let runs = par_map(seeds, |&s| train_si(dataset, cfg, s));
    let mut models = Vec::with_capacity(runs.len());
    let mut reports = Vec::with_capacity(runs.len());
    for run in runs {
        let (m, r) = run?;
        models.push(m);
        reports.push(r);
    }
    let best = reports
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.best_val.total_cmp(&b.1.best_val))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Invalid("empty seed list".into()))?;
    Ok(SweepResult {
        model: models.swap_remove(best),
        best,
        reports,
    })
}
