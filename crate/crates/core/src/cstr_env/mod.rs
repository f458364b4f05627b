//! Simulated CSTR with product storage, electricity prices and a differentiable
//! reward. Dynamics are written against [`Real`] so the same code runs on
//! plain floats and on the autodiff tape.

mod prices;

pub use prices::{load_prices, parse_prices, synth_prices, PriceSeries, SynthPriceConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adgraph::Real;
use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Distance outside the interval (0 inside).
    pub fn excess(&self, v: f64) -> f64 {
        (self.lo - v).max(v - self.hi).max(0.0)
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Nominal operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyState {
    pub c: f64,
    pub temp: f64,
    pub rho: f64,
    pub flow: f64,
}

impl Default for SteadyState {
    fn default() -> Self {
        Self {
            c: 0.1367,
            temp: 0.7293,
            rho: 1.0,
            flow: 390.0,
        }
    }
}

/// Dimensionless CSTR constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub volume: f64,
    pub rate_constant: f64,
    pub activation: f64,
    pub feed_temp: f64,
    pub cooling_coeff: f64,
    pub coolant_temp: f64,
}

impl PlantParams {
    /// Solves the rate constant and cooling coefficient from the two
    /// steady-state equations so that `ss` is an exact equilibrium.
    pub fn from_steady_state(
        volume: f64,
        activation: f64,
        feed_temp: f64,
        coolant_temp: f64,
        ss: &SteadyState,
    ) -> Result<Self> {
        let arrhenius = (-activation / ss.temp).exp();
        let rate_constant = (1.0 - ss.c) * ss.rho / (volume * ss.c * arrhenius);
        let cooling_coeff = ((feed_temp - ss.temp) * ss.rho / volume
            + (1.0 - ss.c) * ss.rho / volume)
            / (ss.flow * (ss.temp - coolant_temp));
        let p = Self {
            volume,
            rate_constant,
            activation,
            feed_temp,
            cooling_coeff,
            coolant_temp,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("volume", self.volume),
            ("rate_constant", self.rate_constant),
            ("activation", self.activation),
            ("feed_temp", self.feed_temp),
            ("cooling_coeff", self.cooling_coeff),
            ("coolant_temp", self.coolant_temp),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config {
                    path: format!("env.plant.{name}"),
                    msg: format!("must be finite and > 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Environment configuration. Plant constants `rate_constant` and
/// `cooling_coeff` default to the steady-state solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub volume: f64,
    pub activation: f64,
    pub feed_temp: f64,
    pub coolant_temp: f64,
    pub rate_constant: Option<f64>,
    pub cooling_coeff: Option<f64>,
    pub steady: SteadyState,
    pub c_bounds: Interval,
    pub temp_bounds: Interval,
    pub storage_bounds: Interval,
    pub rho_bounds: Interval,
    pub flow_bounds: Interval,
    /// Control step length in hours.
    pub dt_ctrl: f64,
    /// RK4 substeps per control step.
    pub substeps: usize,
    /// Weight of the economic component in the total reward.
    pub alpha: f64,
    /// Multiplier of the squared span-relative bound violations.
    pub constraint_weight: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let ss = SteadyState::default();
        Self {
            volume: 20.0,
            activation: 5.0,
            feed_temp: 0.3947,
            coolant_temp: 0.3816,
            rate_constant: None,
            cooling_coeff: None,
            steady: ss,
            c_bounds: Interval::new(0.9 * ss.c, 1.1 * ss.c),
            temp_bounds: Interval::new(0.8 * ss.temp, 1.2 * ss.temp),
            storage_bounds: Interval::new(0.0, 6.0),
            rho_bounds: Interval::new(0.8, 1.2),
            flow_bounds: Interval::new(0.0, 700.0),
            dt_ctrl: 1.0,
            substeps: 15,
            alpha: 1e-3,
            constraint_weight: 1e3,
        }
    }
}

impl EnvConfig {
    pub fn plant(&self) -> Result<PlantParams> {
        let mut p = PlantParams::from_steady_state(
            self.volume,
            self.activation,
            self.feed_temp,
            self.coolant_temp,
            &self.steady,
        )?;
        if let Some(k) = self.rate_constant {
            p.rate_constant = k;
        }
        if let Some(a) = self.cooling_coeff {
            p.cooling_coeff = a;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant()?;
        let cfg = |path: &str, msg: String| Error::Config {
            path: format!("env.{path}"),
            msg,
        };
        for (name, b) in [
            ("c_bounds", self.c_bounds),
            ("temp_bounds", self.temp_bounds),
            ("storage_bounds", self.storage_bounds),
            ("rho_bounds", self.rho_bounds),
            ("flow_bounds", self.flow_bounds),
        ] {
            if !(b.lo < b.hi) {
                return Err(cfg(name, format!("empty interval {b:?}")));
            }
        }
        if !(self.dt_ctrl > 0.0) {
            return Err(cfg("dt_ctrl", "must be > 0".into()));
        }
        if self.substeps == 0 {
            return Err(cfg("substeps", "must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) || !(self.constraint_weight >= 0.0) {
            return Err(cfg("alpha", "reward weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn state_bounds(&self) -> [Interval; 3] {
        [self.c_bounds, self.temp_bounds, self.storage_bounds]
    }

    pub fn input_bounds(&self) -> [Interval; 2] {
        [self.rho_bounds, self.flow_bounds]
    }

    pub fn steady_input(&self) -> ControlInput {
        ControlInput {
            rho: self.steady.rho,
            flow: self.steady.flow,
        }
    }
}

/// Physical plant state: concentration, temperature, stored product in hours
/// of nominal production.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub c: f64,
    pub temp: f64,
    pub storage: f64,
}

impl PlantState {
    pub fn as_array(&self) -> [f64; 3] {
        [self.c, self.temp, self.storage]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            c: a[0],
            temp: a[1],
            storage: a[2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub rho: f64,
    pub flow: f64,
}

impl ControlInput {
    pub fn as_array(&self) -> [f64; 2] {
        [self.rho, self.flow]
    }

    pub fn clipped(&self, cfg: &EnvConfig) -> Self {
        Self {
            rho: cfg.rho_bounds.clamp(self.rho),
            flow: cfg.flow_bounds.clamp(self.flow),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub cost: f64,
    pub constraint: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Reward components of one transition, in the caller's arithmetic.
#[derive(Clone, Copy)]
pub struct RewardTerms<R> {
    pub cost: R,
    pub constraint: R,
    pub total: R,
}

/// Result of advancing one control step.
#[derive(Clone, Copy)]
pub struct Transition<R> {
    pub next: [R; 3],
    pub reward: RewardTerms<R>,
    /// Largest span-relative bound violation of (c, T, storage) over the
    /// substep endpoints; 0 when the bound held throughout.
    pub max_violation: [f64; 3],
}

impl<R: Real> Transition<R> {
    pub fn breakdown(&self, alpha: f64) -> RewardBreakdown {
        RewardBreakdown {
            cost: self.reward.cost.value(),
            constraint: self.reward.constraint.value(),
            total: self.reward.total.value(),
            alpha,
        }
    }

    pub fn next_state(&self) -> PlantState {
        PlantState {
            c: self.next[0].value(),
            temp: self.next[1].value(),
            storage: self.next[2].value(),
        }
    }

    pub fn violated(&self) -> bool {
        self.max_violation.iter().any(|&v| v > 0.0)
    }
}

/// Right-hand side (ċ, Ṫ) of the reactor ODEs.
pub fn ode_rhs<R: Real>(c: R, temp: R, rho: R, flow: R, p: &PlantParams) -> Result<(R, R)> {
    let t = temp.value();
    if !(t > 0.0) {
        return Err(Error::NonPhysical(t));
    }
    let reaction = c * temp.recip().mul_c(-p.activation).exp().mul_c(p.rate_constant);
    let dilution = rho.mul_c(1.0 / p.volume);
    let dc = c.neg().add_c(1.0) * dilution - reaction;
    let dt = temp.neg().add_c(p.feed_temp) * dilution + reaction
        - flow * temp.add_c(-p.coolant_temp).mul_c(p.cooling_coeff);
    Ok((dc, dt))
}

fn penalty<R: Real>(v: R, b: Interval, weight: f64) -> R {
    let inv = 1.0 / b.span();
    let below = v.neg().add_c(b.lo).pos().mul_c(inv);
    let above = v.add_c(-b.hi).pos().mul_c(inv);
    (below.square() + above.square()).mul_c(weight)
}

/// Advances one control step with fixed-step RK4 and accumulates the reward.
///
/// The constraint term sums `weight · (violation / span)²` over all substep
/// endpoints, each scaled by the substep length.
pub fn advance<R: Real>(
    cfg: &EnvConfig,
    plant: &PlantParams,
    state: [R; 3],
    input: [R; 2],
    price: f64,
    substeps: usize,
) -> Result<Transition<R>> {
    let h = cfg.dt_ctrl / substeps as f64;
    let [rho, flow] = input;
    let [mut c, mut temp, mut storage] = state;
    let bounds = cfg.state_bounds();
    let mut con = c.lift(0.0);
    let mut max_violation = [0.0f64; 3];
    for _ in 0..substeps {
        let last = [c.value(), temp.value(), storage.value()];
        let (k1c, k1t) = ode_rhs(c, temp, rho, flow, plant)?;
        let (k2c, k2t) = ode_rhs(c + k1c.mul_c(h / 2.0), temp + k1t.mul_c(h / 2.0), rho, flow, plant)?;
        let (k3c, k3t) = ode_rhs(c + k2c.mul_c(h / 2.0), temp + k2t.mul_c(h / 2.0), rho, flow, plant)?;
        let (k4c, k4t) = ode_rhs(c + k3c.mul_c(h), temp + k3t.mul_c(h), rho, flow, plant)?;
        c = c + (k1c + k2c.mul_c(2.0) + k3c.mul_c(2.0) + k4c).mul_c(h / 6.0);
        temp = temp + (k1t + k2t.mul_c(2.0) + k3t.mul_c(2.0) + k4t).mul_c(h / 6.0);
        storage = storage + rho.add_c(-cfg.steady.rho).mul_c(h);
        if !(c.value().is_finite() && temp.value().is_finite() && storage.value().is_finite()) {
            return Err(Error::Diverged { last_finite: last });
        }
        let vals = [c, temp, storage];
        for i in 0..3 {
            con = con + penalty(vals[i], bounds[i], cfg.constraint_weight).mul_c(h);
            max_violation[i] = max_violation[i].max(bounds[i].excess(vals[i].value()) / bounds[i].span());
        }
    }
    let cost = flow.neg().add_c(cfg.steady.flow).mul_c(price * cfg.dt_ctrl);
    let total = cost.mul_c(cfg.alpha) - con;
    Ok(Transition {
        next: [c, temp, storage],
        reward: RewardTerms {
            cost,
            constraint: con,
            total,
        },
        max_violation,
    })
}

/// One control step on plain floats with the configured substep count.
pub fn step(
    cfg: &EnvConfig,
    plant: &PlantParams,
    state: &PlantState,
    input: &ControlInput,
    price: f64,
) -> Result<(PlantState, RewardBreakdown, Transition<f64>)> {
    let tr = advance(cfg, plant, state.as_array(), input.as_array(), price, cfg.substeps)?;
    Ok((tr.next_state(), tr.breakdown(cfg.alpha), tr))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetMode {
    SteadyState,
    Randomized,
}

/// Initial state: the nominal equilibrium with empty storage, or a uniform
/// perturbation of (c, T) within ±5 % of their bound spans and a uniform
/// storage level.
pub fn reset(cfg: &EnvConfig, mode: ResetMode, rng: &mut impl Rng) -> PlantState {
    match mode {
        ResetMode::SteadyState => PlantState {
            c: cfg.steady.c,
            temp: cfg.steady.temp,
            storage: cfg.storage_bounds.lo,
        },
        ResetMode::Randomized => {
            let dc = 0.05 * cfg.c_bounds.span();
            let dt = 0.05 * cfg.temp_bounds.span();
            PlantState {
                c: cfg.c_bounds.clamp(cfg.steady.c + rng.random_range(-dc..=dc)),
                temp: cfg.temp_bounds.clamp(cfg.steady.temp + rng.random_range(-dt..=dt)),
                storage: rng.random_range(cfg.storage_bounds.lo..=cfg.storage_bounds.hi),
            }
        }
    }
}
