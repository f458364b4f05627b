use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cstr_env::{reset, step, ControlInput, EnvConfig, PlantState, PriceSeries, ResetMode};
use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::mpc_layer::{policy_solve, OcpSpec};

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// Deterministic feedback law used during evaluation.
pub trait Controller {
    fn name(&self) -> String;
    fn act(&mut self, state: &PlantState, forecast: &[f64]) -> Result<ControlInput>;
}

/// The eNMPC with a Koopman model, without exploration.
pub struct ModelController<'a> {
    pub model: &'a KoopmanModel,
    pub spec: &'a OcpSpec,
    pub label: String,
}

impl Controller for ModelController<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn act(&mut self, state: &PlantState, forecast: &[f64]) -> Result<ControlInput> {
        Ok(policy_solve(self.model, self.spec, state, forecast)?.0)
    }
}

/// Applies the same input at every step.
pub struct ConstantController(pub ControlInput);

impl Controller for ConstantController {
    fn name(&self) -> String {
        format!("constant(rho={}, flow={})", self.0.rho, self.0.flow)
    }

    fn act(&mut self, _: &PlantState, _: &[f64]) -> Result<ControlInput> {
        Ok(self.0)
    }
}

/// One simulated control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub price: f64,
    pub rho: f64,
    pub flow: f64,
    /// State after the step.
    pub c: f64,
    pub temp: f64,
    pub storage: f64,
    pub reward: f64,
    /// Largest span-relative excess of c, T and storage within the step.
    pub viol_c: f64,
    pub viol_temp: f64,
    pub viol_storage: f64,
}

impl StepLog {
    pub fn violations(&self) -> [f64; 3] {
        [self.viol_c, self.viol_temp, self.viol_storage]
    }

    pub fn violated(&self) -> bool {
        self.violations().iter().any(|v| *v > 0.0)
    }
}

/// Aggregate metrics of a trajectory log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `Σ F_t p_t / Σ F_ss p_t`.
    pub cost_ratio: f64,
    /// Percentage of control steps with at least one violated bound.
    pub violation_pct: f64,
    /// Mean span-relative size over violation events, one event per violated
    /// variable and step; 0 without events.
    pub mean_violation: f64,
    pub violation_events: usize,
}

impl Metrics {
    /// Recomputes every metric from the log alone.
    pub fn from_log(log: &[StepLog], steady_flow: f64) -> Self {
        let cost: f64 = log.iter().map(|s| s.flow * s.price).sum();
        let nominal: f64 = log.iter().map(|s| steady_flow * s.price).sum();
        let violating = log.iter().filter(|s| s.violated()).count();
        let events: Vec<f64> = log
            .iter()
            .flat_map(|s| s.violations())
            .filter(|v| *v > 0.0)
            .collect();
        Self {
            cost_ratio: if nominal > 0.0 { cost / nominal } else { 0.0 },
            violation_pct: 100.0 * violating as f64 / log.len().max(1) as f64,
            mean_violation: if events.is_empty() {
                0.0
            } else {
                events.iter().sum::<f64>() / events.len() as f64
            },
            violation_events: events.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub controller: String,
    /// Steps requested.
    pub steps: usize,
    /// Steps simulated before the end or an abort.
    pub completed: usize,
    pub cost_ratio: f64,
    pub violation_pct: f64,
    pub mean_violation: f64,
    pub violation_events: usize,
    pub total_reward: f64,
    /// Set when a solver or plant failure ended the episode early.
    pub aborted: Option<String>,
    pub log: Vec<StepLog>,
}

impl EvalReport {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            cost_ratio: self.cost_ratio,
            violation_pct: self.violation_pct,
            mean_violation: self.mean_violation,
            violation_events: self.violation_events,
        }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        crate::shac::write_csv(&dir.join(format!("{stem}_log.csv")), &self.log)
    }
}

/// Runs `controller` over `prices` (or its first `steps` hours) from the
/// chosen initial state. Forecasts beyond the series repeat the last price.
pub fn evaluate(
    controller: &mut dyn Controller,
    env: &EnvConfig,
    horizon: usize,
    prices: &PriceSeries,
    steps: Option<usize>,
    initial: ResetMode,
) -> Result<EvalReport> {
    let plant = env.plant()?;
    let n = steps.unwrap_or(prices.len());
    if n > prices.len() {
        return Err(Error::Prices(format!("{n} steps requested from a {}-hour series", prices.len())));
    }
    // Only the randomized reset draws from the stream.
    let mut state = reset(env, initial, &mut ChaCha8Rng::seed_from_u64(0));
    let mut log = Vec::with_capacity(n);
    let mut aborted = None;
    for k in 0..n {
        let price = prices.prices[k];
        let outcome = controller
            .act(&state, &prices.window(k, horizon))
            .and_then(|u| step(env, &plant, &state, &u, price).map(|r| (u, r)));
        let (u, (next, reward, tr)) = match outcome {
            Ok(v) => v,
            Err(e) => {
                aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let [vc, vt, vs] = tr.max_violation;
        log.push(StepLog {
            step: k,
            price,
            rho: u.rho,
            flow: u.flow,
            c: next.c,
            temp: next.temp,
            storage: next.storage,
            reward: reward.total,
            viol_c: vc,
            viol_temp: vt,
            viol_storage: vs,
        });
        state = next;
    }
    let m = Metrics::from_log(&log, env.steady.flow);
    Ok(EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        controller: controller.name(),
        steps: n,
        completed: log.len(),
        cost_ratio: m.cost_ratio,
        violation_pct: m.violation_pct,
        mean_violation: m.mean_violation,
        violation_events: m.violation_events,
        total_reward: log.iter().map(|s| s.reward).sum(),
        aborted,
        log,
    })
}
