use log::info;
use serde::{Deserialize, Serialize};

use crate::adgraph::Tape;
use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::ppo::{PpoConfig, PpoTrainer};
use crate::shac::{collect_short_rollout, Scenario, ShacConfig, ShacTrainer};

/// `⟨v, w⟩ / (‖v‖ ‖w‖)`.
pub fn cosine_similarity(v: &[f64], w: &[f64]) -> Result<f64> {
    if v.len() != w.len() {
        return Err(Error::Invalid(format!("vector lengths differ: {} vs {}", v.len(), w.len())));
    }
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 || nw == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    Ok((dot / (nv * nw)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSimilarity {
    /// Mean over all pairs of non-zero gradients.
    pub mean: f64,
    pub pairs: usize,
    pub used: usize,
    /// Indices of all-zero gradients left out of the pairs.
    pub excluded: Vec<usize>,
}

pub fn mean_pairwise_similarity(grads: &[Vec<f64>]) -> Result<PairwiseSimilarity> {
    let (excluded, used): (Vec<usize>, Vec<usize>) =
        (0..grads.len()).partition(|&i| grads[i].iter().all(|x| *x == 0.0));
    if used.len() < 2 {
        return Err(Error::Invalid(format!(
            "need two non-zero gradients, got {} of {}",
            used.len(),
            grads.len()
        )));
    }
    let mut sum = 0.0;
    let mut pairs = 0;
    for (a, &i) in used.iter().enumerate() {
        for &j in &used[a + 1..] {
            sum += cosine_similarity(&grads[i], &grads[j])?;
            pairs += 1;
        }
    }
    Ok(PairwiseSimilarity {
        mean: sum / pairs as f64,
        pairs,
        used: used.len(),
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Shac,
    Ppo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradStudyReport {
    pub algorithm: Algorithm,
    pub requested: usize,
    pub similarity: PairwiseSimilarity,
    /// Critic regression loss after each fitting round.
    pub critic_losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// Settings of one study.
#[derive(Clone, Debug)]
pub struct StudySetup {
    pub n_gradients: usize,
    pub critic_updates: usize,
    /// Restart every recorded window from the same environment states.
    pub fixed_start: bool,
}

/// Fits the critic to the frozen SI policy, then records `n_gradients`
/// policy gradients without applying them; the critic stays fixed while
/// recording.
pub fn shac_gradient_study(
    scenario: Scenario,
    model: KoopmanModel,
    cfg: &ShacConfig,
    setup: &StudySetup,
) -> Result<GradStudyReport> {
    let mut trainer = ShacTrainer::new(scenario, model, cfg.clone())?;
    let mut critic_losses = Vec::with_capacity(setup.critic_updates);
    for _ in 0..setup.critic_updates {
        let tape = Tape::new();
        let bound = trainer.model.params.bind_const(&tape);
        let buffer = collect_short_rollout(
            &tape,
            &trainer.scenario,
            &trainer.model,
            &bound,
            &trainer.critic,
            &mut trainer.envs,
            cfg.horizon,
            cfg.explore,
        );
        critic_losses.push(trainer.fit_critic(&buffer)?);
    }
    info!("shac study: critic fitted, last loss {:?}", critic_losses.last());
    let start = trainer.envs.clone();
    let mut grads = Vec::with_capacity(setup.n_gradients);
    for _ in 0..setup.n_gradients {
        if setup.fixed_start {
            trainer.envs = start.clone();
        }
        let (g, _) = trainer.actor_gradient(cfg.horizon)?;
        let g = g.ok_or_else(|| Error::Invalid("every environment window aborted".into()))?;
        grads.push(g.0.flatten());
    }
    finish(Algorithm::Shac, grads, critic_losses)
}

/// PPO counterpart: the critic is fitted on rollouts of `cfg.rollout` steps and
/// each recorded gradient is the clipped-surrogate gradient of one fresh
/// rollout at unit ratio.
pub fn ppo_gradient_study(
    scenario: Scenario,
    model: KoopmanModel,
    cfg: &PpoConfig,
    setup: &StudySetup,
) -> Result<GradStudyReport> {
    let mut trainer = PpoTrainer::new(scenario, model, cfg.clone())?;
    let mut critic_losses = Vec::with_capacity(setup.critic_updates);
    for _ in 0..setup.critic_updates {
        let r = trainer.rollout();
        critic_losses.push(trainer.fit_critic(&r)?);
    }
    info!("ppo study: critic fitted, last loss {:?}", critic_losses.last());
    let start = trainer.envs.clone();
    let mut grads = Vec::with_capacity(setup.n_gradients);
    for _ in 0..setup.n_gradients {
        if setup.fixed_start {
            trainer.envs = start.clone();
        }
        let r = trainer.rollout();
        grads.push(trainer.policy_gradient(&r)?.flatten());
    }
    finish(Algorithm::Ppo, grads, critic_losses)
}

fn finish(algorithm: Algorithm, grads: Vec<Vec<f64>>, critic_losses: Vec<f64>) -> Result<GradStudyReport> {
    let similarity = mean_pairwise_similarity(&grads)?;
    if !similarity.excluded.is_empty() {
        info!("{algorithm:?} study: excluded all-zero gradients {:?}", similarity.excluded);
    }
    Ok(GradStudyReport {
        algorithm,
        requested: grads.len(),
        similarity,
        critic_losses,
        grad_norms: grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).collect(),
    })
}
