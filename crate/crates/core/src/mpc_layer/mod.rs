//! Differentiable economic MPC policy built on the Koopman surrogate.
//!
//! The latent trajectory is condensed out of the optimization: with
//! `z_{j+1} = A z_j + B u_{blk(j)}`, every predicted output `C z_j` is an
//! affine function of the hourly control blocks, so the QP is posed over
//! `[u_0 … u_{H−1}; s]` only. Its data `(P, q, G, h)` is assembled on the tape,
//! which carries gradients from the solution back into `A`, `B`, `C`, the
//! encoder, the measured state and the storage level.

mod diff;
mod qp;

pub use diff::{diff_qp, QpGrads, QpOp, ADJOINT_REG};
pub use qp::{solve_qp, QpProblem, QpSettings, QpSolution};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adgraph::{Bound, NodeId, Tape, Tensor};
use crate::cstr_env::{ControlInput, EnvConfig, Interval, PlantState};
use crate::error::{Error, Result};
use crate::koopman::{KoopmanModel, INPUT_DIM, STATE_DIM};

/// Tunable part of the optimal control problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    /// Prediction horizon in control steps.
    pub horizon: usize,
    /// Model steps per control step.
    pub model_substeps: usize,
    /// Quadratic penalty on the span-relative slacks.
    pub slack_penalty: f64,
    /// Weight of `‖u − u_ss‖²` in normalized input units.
    pub control_reg: f64,
    /// Exploration noise std as a fraction of each control's box span.
    pub explore_frac: f64,
    pub qp: QpSettings,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 9,
            model_substeps: 4,
            slack_penalty: 1e3,
            control_reg: 1e-6,
            explore_frac: 0.02,
            qp: QpSettings::default(),
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, msg: &str| Error::Config {
            path: format!("ocp.{path}"),
            msg: msg.into(),
        };
        if self.horizon == 0 {
            return Err(err("horizon", "must be >= 1"));
        }
        if self.model_substeps == 0 {
            return Err(err("model_substeps", "must be >= 1"));
        }
        if !(self.slack_penalty > 0.0) {
            return Err(err("slack_penalty", "must be > 0"));
        }
        if !(self.control_reg > 0.0) {
            return Err(err("control_reg", "must be > 0"));
        }
        if !(self.explore_frac >= 0.0) {
            return Err(err("explore_frac", "must be >= 0"));
        }
        Ok(())
    }
}

/// Everything needed to pose the QP: tunables plus plant bounds and economics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpSpec {
    pub config: OcpConfig,
    /// c, T, storage.
    pub state_bounds: [Interval; 3],
    /// ρ, F.
    pub control_bounds: [Interval; 2],
    pub steady_input: [f64; 2],
    pub dt_ctrl: f64,
    pub alpha: f64,
}

impl OcpSpec {
    pub fn new(config: OcpConfig, env: &EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state_bounds: env.state_bounds(),
            control_bounds: env.input_bounds(),
            steady_input: env.steady_input().as_array(),
            dt_ctrl: env.dt_ctrl,
            alpha: env.alpha,
        })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn layout(&self) -> QpLayout {
        QpLayout::new(self.config.horizon, self.config.model_substeps)
    }

    /// Exploration standard deviation per control channel.
    pub fn sigma(&self) -> [f64; 2] {
        self.control_bounds.map(|b| self.config.explore_frac * b.span())
    }
}

/// Index bookkeeping of the condensed QP.
///
/// Decision vector: `2H` normalized controls (ρ, F per hour), then one slack
/// per (model step, channel) for c and T, then one slack per hour for storage.
/// Rows: upper and lower output bounds per model step, upper and lower storage
/// bounds per hour, the control box, and `s ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QpLayout {
    pub horizon: usize,
    pub substeps: usize,
    pub n_controls: usize,
    /// Model steps predicted over the horizon, i.e. latent states eliminated.
    pub latent_blocks: usize,
    pub n_output_slacks: usize,
    pub n_storage_slacks: usize,
    pub n: usize,
    pub m: usize,
}

impl QpLayout {
    pub fn new(horizon: usize, substeps: usize) -> Self {
        let latent_blocks = horizon * substeps;
        let n_controls = INPUT_DIM * horizon;
        let n_output_slacks = STATE_DIM * latent_blocks;
        let n_storage_slacks = horizon;
        let n = n_controls + n_output_slacks + n_storage_slacks;
        let m = 2 * n_output_slacks + 2 * horizon + 2 * n_controls + n_output_slacks + n_storage_slacks;
        Self {
            horizon,
            substeps,
            n_controls,
            latent_blocks,
            n_output_slacks,
            n_storage_slacks,
            n,
            m,
        }
    }

    pub fn slack_offset(&self) -> usize {
        self.n_controls
    }

    pub fn n_slacks(&self) -> usize {
        self.n_output_slacks + self.n_storage_slacks
    }
}

/// QP data as tape nodes: `P` (n×n), `q` (n), `G` (m×n), `h` (m).
#[derive(Clone, Copy, Debug)]
pub struct QpNodes {
    pub layout: QpLayout,
    pub p: NodeId,
    pub q: NodeId,
    pub g: NodeId,
    pub h: NodeId,
}

impl QpNodes {
    pub fn problem(&self, tape: &Tape) -> Result<QpProblem> {
        Ok(QpProblem::new(
            tape.value(self.p).into_data(),
            tape.value(self.q).into_data(),
            tape.value(self.g).into_data(),
            tape.value(self.h).into_data(),
        )?)
    }
}

fn constant_matrix(tape: &Tape, rows: usize, cols: usize, fill: impl Fn(usize, usize) -> f64) -> NodeId {
    let data = (0..rows * cols).map(|i| fill(i / cols, i % cols)).collect();
    tape.constant(Tensor::matrix(rows, cols, data))
}

/// Assembles the QP on the tape.
///
/// `x` is the measured (c, T) in physical units, shape (2,); `storage` a scalar
/// node; `prices` a node of shape (H,). The encoder is applied once, to the
/// normalized `x`.
pub fn build_qp(
    tape: &Tape,
    model: &KoopmanModel,
    bound: &Bound,
    x: NodeId,
    storage: NodeId,
    prices: NodeId,
    spec: &OcpSpec,
) -> Result<QpNodes> {
    let lay = spec.layout();
    let (hz, sub, nl) = (lay.horizon, lay.substeps, model.latent_dim());
    if tape.shape(prices) != [hz] {
        return Err(Error::Invalid(format!(
            "price forecast has shape {:?}, expected [{hz}]",
            tape.shape(prices)
        )));
    }
    if !tape.value(x).all_finite() || !tape.value(storage).all_finite() {
        return Err(Error::Invalid("non-finite state passed to the controller".into()));
    }
    model.check_finite()?;
    let norm = &model.norm;
    let (n, nu, ns) = (lay.n, lay.n_controls, lay.n_slacks());

    // Normalized state and initial latent.
    let x_n = tape.offset(x, &Tensor::vector(norm.state_mean.iter().map(|m| -m).collect()))?;
    let inv = tape.constant(Tensor::vector(norm.state_scale.iter().map(|s| 1.0 / s).collect()));
    let x_n = tape.mul(x_n, inv)?;
    let z0 = model.encode(tape, bound, x_n)?;
    let z0 = tape.reshape(z0, &[nl, 1])?;

    // Augmented latent trajectory: column 0 is the free response, columns
    // 1.. are the sensitivities to the control blocks.
    let (a, b, c) = (bound.get("A"), bound.get("B"), bound.get("C"));
    let zeros = tape.constant(Tensor::zeros(&[nl, nu]));
    let mut zaug = tape.concat(&[z0, zeros], 1)?;
    let mut outputs = Vec::with_capacity(lay.latent_blocks);
    for blk in 0..hz {
        let sel = constant_matrix(tape, INPUT_DIM, nu + 1, |r, col| {
            (col == 1 + INPUT_DIM * blk + r) as u8 as f64
        });
        let b_blk = tape.matmul(b, sel)?;
        for _ in 0..sub {
            let az = tape.matmul(a, zaug)?;
            zaug = tape.add(az, b_blk)?;
            outputs.push(tape.matmul(c, zaug)?);
        }
    }
    let ystack = tape.concat(&outputs, 0)?; // (2·latent_blocks) × (nu + 1)
    let no = lay.n_output_slacks;
    let free = tape.reshape(tape.slice(ystack, 1, 0, 1)?, &[no])?;
    let gamma = tape.slice(ystack, 1, 1, nu + 1)?;

    // Output bounds in normalized units; slacks are span-relative.
    let out_bounds = [spec.state_bounds[0], spec.state_bounds[1]];
    let ub: Vec<f64> = (0..no)
        .map(|r| (out_bounds[r % 2].hi - norm.state_mean[r % 2]) / norm.state_scale[r % 2])
        .collect();
    let lb: Vec<f64> = (0..no)
        .map(|r| (out_bounds[r % 2].lo - norm.state_mean[r % 2]) / norm.state_scale[r % 2])
        .collect();
    let slack_cols = constant_matrix(tape, no, ns, |r, col| {
        if col == r {
            -out_bounds[r % 2].span() / norm.state_scale[r % 2]
        } else {
            0.0
        }
    });
    let g_up = tape.concat(&[gamma, slack_cols], 1)?;
    let neg_gamma = tape.scale(gamma, -1.0);
    let g_lo = tape.concat(&[neg_gamma, slack_cols], 1)?;
    let h_up = tape.offset(tape.scale(free, -1.0), &Tensor::vector(ub))?;
    let h_lo = tape.offset(free, &Tensor::vector(lb.iter().map(|v| -v).collect()))?;

    // Storage after each hour j: storage + Δt Σ_{k<j} (ρ_k − ρ_ss).
    let st = spec.state_bounds[2];
    let dt = spec.dt_ctrl;
    let (rho_mean, rho_scale) = (norm.input_mean[0], norm.input_scale[0]);
    let rho_ss = spec.steady_input[0];
    let g_st = constant_matrix(tape, 2 * hz, n, |r, col| {
        let (j, sign) = if r < hz { (r + 1, 1.0) } else { (r - hz + 1, -1.0) };
        if col < nu && col % INPUT_DIM == 0 && col / INPUT_DIM < j {
            sign * dt * rho_scale
        } else if col == nu + no + (j - 1) {
            -st.span()
        } else {
            0.0
        }
    });
    let h_st_const: Vec<f64> = (0..2 * hz)
        .map(|r| {
            let (j, upper) = if r < hz { (r + 1, true) } else { (r - hz + 1, false) };
            let drift = dt * j as f64 * (rho_mean - rho_ss);
            if upper {
                st.hi - drift
            } else {
                -st.lo + drift
            }
        })
        .collect();
    let signs = constant_matrix(tape, 2 * hz, 1, |r, _| if r < hz { -1.0 } else { 1.0 });
    let storage_v = tape.reshape(storage, &[1])?;
    let h_st = tape.offset(tape.matmul(signs, storage_v)?, &Tensor::vector(h_st_const))?;

    // Control box in normalized units.
    let boxes = spec.control_bounds;
    let g_box = constant_matrix(tape, 2 * nu, n, |r, col| {
        if r < nu && col == r {
            1.0
        } else if r >= nu && col == r - nu {
            -1.0
        } else {
            0.0
        }
    });
    let h_box: Vec<f64> = (0..2 * nu)
        .map(|r| {
            let ch = r % INPUT_DIM;
            let (mean, scale) = (norm.input_mean[ch], norm.input_scale[ch]);
            if r < nu {
                (boxes[ch].hi - mean) / scale
            } else {
                -(boxes[ch].lo - mean) / scale
            }
        })
        .collect();
    let h_box = tape.constant(Tensor::vector(h_box));

    // s ≥ 0.
    let g_s = constant_matrix(tape, ns, n, |r, col| if col == nu + r { -1.0 } else { 0.0 });
    let h_s = tape.constant(Tensor::zeros(&[ns]));

    let g = tape.concat(&[g_up, g_lo, g_st, g_box, g_s], 0)?;
    let h = tape.concat(&[h_up, h_lo, h_st, h_box, h_s], 0)?;

    // Objective: α p_k Δt F_k + M ‖s‖² + ε ‖u − u_ss‖².
    let eps = spec.config.control_reg;
    let mm = spec.config.slack_penalty;
    let p = constant_matrix(tape, n, n, |r, col| {
        if r != col {
            0.0
        } else if r < nu {
            2.0 * eps
        } else {
            2.0 * mm
        }
    });
    let u_ss = norm.input(spec.steady_input);
    let q_const: Vec<f64> = (0..n)
        .map(|i| if i < nu { -2.0 * eps * u_ss[i % INPUT_DIM] } else { 0.0 })
        .collect();
    let f_scale = norm.input_scale[1];
    let price_map = constant_matrix(tape, n, hz, |r, k| {
        if r == INPUT_DIM * k + 1 {
            spec.alpha * dt * f_scale
        } else {
            0.0
        }
    });
    let q = tape.offset(tape.matmul(price_map, prices)?, &Tensor::vector(q_const))?;
    Ok(QpNodes { layout: lay, p, q, g, h })
}

/// Solves the QP and records the solution map on the tape. Returns the primal
/// node (shape (n,)) and the solution.
pub fn qp_layer(tape: &Tape, nodes: &QpNodes, settings: &QpSettings) -> Result<(NodeId, QpSolution)> {
    let problem = nodes.problem(tape)?;
    let solution = solve_qp(&problem, settings)?;
    let out = Tensor::vector(solution.x.clone());
    let id = tape.custom(
        &[nodes.p, nodes.q, nodes.g, nodes.h],
        out,
        Box::new(QpOp {
            problem,
            solution: solution.clone(),
        }),
    );
    Ok((id, solution))
}

/// Result of one differentiable policy evaluation.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    /// First control in physical units, shape (2,).
    pub u0: NodeId,
    pub solution: QpSolution,
    pub layout: QpLayout,
}

impl PolicyOutput {
    /// Planned controls in physical units, one per hour.
    pub fn plan(&self, model: &KoopmanModel) -> Vec<[f64; 2]> {
        (0..self.layout.horizon)
            .map(|k| model.norm.input_inv([self.solution.x[2 * k], self.solution.x[2 * k + 1]]))
            .collect()
    }

    pub fn slacks(&self) -> &[f64] {
        let off = self.layout.slack_offset();
        &self.solution.x[off..off + self.layout.n_slacks()]
    }
}

/// Builds and solves the QP, returning `u*₀` on the tape.
pub fn policy_forward(
    tape: &Tape,
    model: &KoopmanModel,
    bound: &Bound,
    x: NodeId,
    storage: NodeId,
    prices: NodeId,
    spec: &OcpSpec,
) -> Result<PolicyOutput> {
    let nodes = build_qp(tape, model, bound, x, storage, prices, spec)?;
    let (sol, solution) = qp_layer(tape, &nodes, &spec.config.qp)?;
    let u_n = tape.slice(sol, 0, 0, INPUT_DIM)?;
    let scale = tape.constant(Tensor::vector(model.norm.input_scale.to_vec()));
    let u = tape.mul(u_n, scale)?;
    let u0 = tape.offset(u, &Tensor::vector(model.norm.input_mean.to_vec()))?;
    Ok(PolicyOutput {
        u0,
        solution,
        layout: nodes.layout,
    })
}

/// Deterministic controller output on plain floats, with the QP solution.
pub fn policy_solve(
    model: &KoopmanModel,
    spec: &OcpSpec,
    state: &PlantState,
    prices: &[f64],
) -> Result<(ControlInput, QpSolution)> {
    let tape = Tape::new();
    let bound = model.params.bind_const(&tape);
    let x = tape.constant(Tensor::vector(vec![state.c, state.temp]));
    let storage = tape.constant(Tensor::scalar(state.storage));
    let p = tape.constant(Tensor::vector(prices.to_vec()));
    let out = policy_forward(&tape, model, &bound, x, storage, p, spec)?;
    let u = tape.value(out.u0);
    let u = ControlInput { rho: u.data()[0], flow: u.data()[1] };
    Ok((clip(u, spec), out.solution))
}

fn clip(u: ControlInput, spec: &OcpSpec) -> ControlInput {
    ControlInput {
        rho: spec.control_bounds[0].clamp(u.rho),
        flow: spec.control_bounds[1].clamp(u.flow),
    }
}

/// Adds zero-mean Gaussian noise with per-channel std `sigma` and clips to the box.
pub fn add_exploration(u: ControlInput, sigma: [f64; 2], spec: &OcpSpec, rng: &mut impl Rng) -> ControlInput {
    let mut out = [u.rho, u.flow];
    for (v, s) in out.iter_mut().zip(sigma) {
        if s > 0.0 {
            *v += Normal::new(0.0, s).expect("finite std").sample(rng);
        }
    }
    clip(ControlInput { rho: out[0], flow: out[1] }, spec)
}

/// Controller output, optionally perturbed by exploration noise; always inside the box.
pub fn policy_act(
    model: &KoopmanModel,
    spec: &OcpSpec,
    state: &PlantState,
    prices: &[f64],
    explore: bool,
    rng: &mut impl Rng,
) -> Result<ControlInput> {
    let (u, _) = policy_solve(model, spec, state, prices)?;
    Ok(if explore { add_exploration(u, spec.sigma(), spec, rng) } else { u })
}
