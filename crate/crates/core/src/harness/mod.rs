//! Configuration, closed-loop evaluation, learning-curve summaries, the
//! gradient-variance study and the command-line front end.

pub mod cli;
mod config;
mod evaluate;
mod study;

pub use config::{EvalConfig, GradStudyConfig, PriceConfig, RunConfig, SiRunConfig};
pub use evaluate::{
    evaluate, ConstantController, Controller, EvalReport, Metrics, ModelController, StepLog, EVAL_SCHEMA_VERSION,
};
pub use study::{
    cosine_similarity, mean_pairwise_similarity, ppo_gradient_study, shac_gradient_study, Algorithm, GradStudyReport,
    PairwiseSimilarity, StudySetup,
};

use serde::{Deserialize, Serialize};

use crate::shac::CurveRow;

/// Running-average reward at the start and end of a learning curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub rows: usize,
    /// Mean of `run_avg_1024` over the first 10 % of rows.
    pub first_decile: f64,
    /// Mean of `run_avg_1024` over the last 10 % of rows.
    pub last_decile: f64,
}

impl CurveSummary {
    pub fn from_curve(curve: &[CurveRow]) -> Self {
        let k = (curve.len() / 10).max(1).min(curve.len());
        let mean = |rows: &[CurveRow]| rows.iter().map(|r| r.run_avg_1024).sum::<f64>() / rows.len().max(1) as f64;
        Self {
            rows: curve.len(),
            first_decile: mean(&curve[..k]),
            last_decile: mean(&curve[curve.len() - k..]),
        }
    }

    pub fn improved(&self) -> bool {
        self.last_decile > self.first_decile
    }
}

#[cfg(test)]
mod tests;
