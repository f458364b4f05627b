//! Dense primal-dual interior-point solver for
//! `min ½xᵀPx + qᵀx  s.t.  Ax = b,  Gx ≤ h`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KktResiduals, QpError};

/// Row-major dense QP data.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub n: usize,
    /// n × n, symmetric positive semidefinite.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// m × n.
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    /// p × n.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl QpProblem {
    pub fn new(p: Vec<f64>, q: Vec<f64>, g: Vec<f64>, h: Vec<f64>) -> Result<Self, QpError> {
        Self::with_equalities(p, q, g, h, Vec::new(), Vec::new())
    }

    pub fn with_equalities(
        p: Vec<f64>,
        q: Vec<f64>,
        g: Vec<f64>,
        h: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        let check = |what: &str, len: usize, rows: usize| {
            if len != rows * n {
                Err(QpError::Dimensions(format!("{what}: {len} entries for {rows}×{n}")))
            } else {
                Ok(())
            }
        };
        check("P", p.len(), n)?;
        check("G", g.len(), h.len())?;
        check("A", a.len(), b.len())?;
        let qp = Self { n, p, q, g, h, a, b };
        for (name, v) in [("P", &qp.p), ("q", &qp.q), ("G", &qp.g), ("h", &qp.h), ("A", &qp.a), ("b", &qp.b)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(QpError::NonFinite(name));
            }
        }
        Ok(qp)
    }

    pub fn m(&self) -> usize {
        self.h.len()
    }

    pub fn p_eq(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut v = 0.0;
        for i in 0..n {
            let px: f64 = (0..n).map(|j| self.p[i * n + j] * x[j]).sum();
            v += 0.5 * x[i] * px + self.q[i] * x[i];
        }
        v
    }

    /// Symmetry and positive semidefiniteness of P (smallest eigenvalue ≥ −tol·scale).
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n;
        let pm = DMatrix::from_row_slice(n, n, &self.p);
        let asym = (&pm - pm.transpose()).abs().max();
        let scale = pm.abs().max().max(1.0);
        if asym > 1e-10 * scale {
            return Err(QpError::Dimensions(format!("P is not symmetric (|P − Pᵀ| = {asym:e})")));
        }
        if n > 0 {
            let min = pm.symmetric_eigenvalues().min();
            if min < -1e-10 * scale {
                return Err(QpError::NotPsd(min));
            }
        }
        Ok(())
    }

    pub fn g_row(&self, i: usize) -> &[f64] {
        &self.g[i * self.n..(i + 1) * self.n]
    }

    pub fn residuals(&self, x: &[f64], y: &[f64], z: &[f64], s: &[f64]) -> KktResiduals {
        let (n, m, pe) = (self.n, self.m(), self.p_eq());
        let mut rd = self.q.clone();
        for i in 0..n {
            rd[i] += (0..n).map(|j| self.p[i * n + j] * x[j]).sum::<f64>();
        }
        for k in 0..m {
            for (j, r) in rd.iter_mut().enumerate() {
                *r += self.g[k * n + j] * z[k];
            }
        }
        for k in 0..pe {
            for (j, r) in rd.iter_mut().enumerate() {
                *r += self.a[k * n + j] * y[k];
            }
        }
        let mut primal: f64 = 0.0;
        for k in 0..m {
            let gx: f64 = self.g_row(k).iter().zip(x).map(|(a, b)| a * b).sum();
            primal = primal.max((gx + s[k] - self.h[k]).abs());
        }
        for k in 0..pe {
            let ax: f64 = (0..n).map(|j| self.a[k * n + j] * x[j]).sum();
            primal = primal.max((ax - self.b[k]).abs());
        }
        let gap = s.iter().zip(z).map(|(a, b)| (a * b).abs()).fold(0.0, f64::max);
        KktResiduals {
            primal,
            dual: rd.iter().fold(0.0, |a, v| a.max(v.abs())),
            gap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    /// Tolerance on complementarity, and on primal and dual residuals relative to
    /// `1 + ‖h, b‖∞` and `1 + ‖q‖∞`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Equality multipliers.
    pub y: Vec<f64>,
    /// Inequality multipliers, `z ≥ 0`.
    pub z: Vec<f64>,
    /// Inequality slacks `h − Gx ≥ 0`.
    pub s: Vec<f64>,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

impl QpSolution {
    /// min over rows of `z_i + s_i`; small values flag weakly active constraints.
    pub fn strict_complementarity(&self) -> f64 {
        self.z
            .iter()
            .zip(&self.s)
            .map(|(z, s)| z + s)
            .fold(f64::INFINITY, f64::min)
    }

    /// Rows whose multiplier dominates their slack.
    pub fn active_set(&self) -> Vec<usize> {
        (0..self.z.len()).filter(|&i| self.z[i] > self.s[i]).collect()
    }
}

/// Row-wise nonzeros of P and G, used inside the iterations.
struct Sparse {
    p: Vec<Vec<(usize, f64)>>,
    g: Vec<Vec<(usize, f64)>>,
    /// Per variable: `(true, k)` for the k-th member of a set of variables that
    /// never share a row of P or G (their block of `P + GᵀWG` is diagonal),
    /// `(false, k)` for the k-th remaining variable.
    part: Vec<(bool, usize)>,
    n_diag: usize,
    /// For each eliminated variable, the rows of G that contain it.
    owned: Vec<Vec<usize>>,
    /// Rows of G without an eliminated variable.
    free_rows: Vec<usize>,
    /// Per row of G: its entries on the remaining variables (in their own
    /// numbering) and its coefficient on the eliminated variable, if any.
    rest: Vec<Vec<(usize, f64)>>,
    coef: Vec<f64>,
}

impl Sparse {
    fn new(qp: &QpProblem) -> Self {
        let n = qp.n;
        let rows = |data: &[f64], count: usize| -> Vec<Vec<(usize, f64)>> {
            (0..count)
                .map(|k| {
                    data[k * n..(k + 1) * n]
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(j, &v)| (j, v))
                        .collect()
                })
                .collect()
        };
        let (p, g) = (rows(&qp.p, n), rows(&qp.g, qp.m()));
        let mut adj = vec![false; n * n];
        for row in p.iter().enumerate().map(|(i, r)| {
            let mut cols: Vec<usize> = r.iter().map(|e| e.0).collect();
            cols.push(i);
            cols
        }).chain(g.iter().map(|r| r.iter().map(|e| e.0).collect())) {
            for &i in &row {
                for &j in &row {
                    adj[i * n + j] = true;
                }
            }
        }
        // Greedy independent set, low-degree variables first.
        let degree: Vec<usize> = (0..n).map(|i| adj[i * n..(i + 1) * n].iter().filter(|&&b| b).count()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| degree[i]);
        let mut in_set = vec![false; n];
        for &i in &order {
            let p_diag_only = p[i].iter().all(|e| e.0 == i);
            if p_diag_only && !(0..n).any(|j| j != i && in_set[j] && adj[i * n + j]) {
                in_set[i] = true;
            }
        }
        let (mut nd, mut nf) = (0, 0);
        let part = in_set
            .iter()
            .map(|&d| {
                let c = if d { &mut nd } else { &mut nf };
                *c += 1;
                (d, *c - 1)
            })
            .collect();
        let part: Vec<(bool, usize)> = part;
        let mut owned = vec![Vec::new(); nd];
        let mut free_rows = Vec::new();
        for (k, row) in g.iter().enumerate() {
            match row.iter().find(|e| part[e.0].0) {
                Some(&(j, _)) => owned[part[j].1].push(k),
                None => free_rows.push(k),
            }
        }
        let rest = g
            .iter()
            .map(|row| {
                row.iter()
                    .filter_map(|&(j, v)| match part[j] {
                        (false, b) => Some((b, v)),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        let coef = g.iter().map(|row| row.iter().find(|e| part[e.0].0).map_or(0.0, |e| e.1)).collect();
        Self { p, g, part, n_diag: nd, owned, free_rows, rest, coef }
    }

    fn p_mul(&self, x: &[f64]) -> Vec<f64> {
        self.p.iter().map(|row| row.iter().map(|&(j, v)| v * x[j]).sum()).collect()
    }

    fn g_dot(&self, k: usize, x: &[f64]) -> f64 {
        self.g[k].iter().map(|&(j, v)| v * x[j]).sum()
    }

    /// `out += Gᵀ y`.
    fn gt_add(&self, y: &[f64], out: &mut [f64]) {
        for (row, &yk) in self.g.iter().zip(y) {
            if yk != 0.0 {
                for &(j, v) in row {
                    out[j] += v * yk;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Lower-triangular Cholesky factor, row-major. Pivots that collapse under
/// roundoff (the barrier weights span many orders of magnitude near the
/// solution) are replaced by a huge value, which zeroes the step along that
/// direction instead of failing.
struct Chol {
    n: usize,
    l: Vec<f64>,
}

impl Chol {
    /// Factors the lower triangle of the row-major matrix `a` in place.
    fn factor(mut l: Vec<f64>, n: usize) -> Self {
        let max_diag = (0..n).map(|i| l[i * n + i].abs()).fold(0.0, f64::max);
        let tiny = 1e-30 * max_diag.max(1e-300);
        for i in 0..n {
            let (done, rest) = l.split_at_mut(i * n);
            let row_i = &mut rest[..n];
            for j in 0..i {
                let row_j = &done[j * n..j * n + n];
                row_i[j] = (row_i[j] - dot(&row_i[..j], &row_j[..j])) / row_j[j];
            }
            let d = row_i[i] - dot(&row_i[..i], &row_i[..i]);
            row_i[i] = if d > tiny { d.sqrt() } else { 1e64 };
        }
        Self { n, l }
    }

    fn solve(&self, b: &mut [f64]) {
        let (n, l) = (self.n, &self.l);
        for i in 0..n {
            let row = &l[i * n..i * n + n];
            b[i] = (b[i] - dot(&row[..i], &b[..i])) / row[i];
        }
        for i in (0..n).rev() {
            let row = &l[i * n..i * n + n];
            b[i] /= row[i];
            let bi = b[i];
            for (bk, lk) in b[..i].iter_mut().zip(&row[..i]) {
                *bk -= lk * bi;
            }
        }
    }
}

/// Factorization of the reduced Newton matrix `P + GᵀWG` (bordered by A).
enum Factor {
    /// Diagonal block eliminated exactly; Cholesky of the Schur complement on
    /// the remaining variables. `dinv` is 0 for collapsed pivots.
    Schur { dinv: Vec<f64>, e: Vec<f64>, chol: Chol },
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

struct Newton<'a> {
    qp: &'a QpProblem,
    sp: &'a Sparse,
    w: Vec<f64>,
    factor: Factor,
}

impl<'a> Newton<'a> {
    fn new(qp: &'a QpProblem, sp: &'a Sparse, w: Vec<f64>) -> Self {
        let (n, pe) = (qp.n, qp.p_eq());
        // Tiny shift relative to the cost curvature only; the barrier terms can
        // reach 1e20 near convergence and must not set the scale.
        let reg = 1e-13 * (0..n).map(|i| qp.p[i * n + i].abs()).fold(1.0, f64::max);
        let factor = if pe == 0 {
            Self::schur(sp, &w, reg)
        } else {
            let mut k = DMatrix::<f64>::zeros(n + pe, n + pe);
            for (i, row) in sp.p.iter().enumerate() {
                for &(j, v) in row {
                    k[(i, j)] += v;
                }
            }
            for (row, &wk) in sp.g.iter().zip(&w) {
                for &(i, vi) in row {
                    for &(j, vj) in row {
                        k[(i, j)] += wk * vi * vj;
                    }
                }
            }
            for i in 0..n {
                k[(i, i)] += reg;
            }
            for e in 0..pe {
                for j in 0..n {
                    k[(n + e, j)] = qp.a[e * n + j];
                    k[(j, n + e)] = qp.a[e * n + j];
                }
                k[(n + e, n + e)] = -reg;
            }
            Factor::Lu(k.lu())
        };
        Self { qp, sp, w, factor }
    }

    /// Eliminates the diagonal block row group by row group. For variable j
    /// with rows r (coefficient c_r on j, remainder a_r) and D = P_jj + Σ w_r c_r²,
    /// the Schur complement gains Σ M_rr' a_r a_r'ᵀ with
    /// M_rr = w_r (D − w_r c_r²) / D and M_rr' = −w_r w_r' c_r c_r' / D. The
    /// numerator of M_rr is summed directly, so large barrier weights on an
    /// active row never cancel against each other.
    fn schur(sp: &Sparse, w: &[f64], reg: f64) -> Factor {
        let nd = sp.n_diag;
        let nf = sp.part.len() - nd;
        let mut f = vec![0.0; nf * nf];
        let mut d0 = vec![reg; nd];
        for a in 0..nf {
            f[a * nf + a] = reg;
        }
        for (i, row) in sp.p.iter().enumerate() {
            for &(j, v) in row {
                match (sp.part[i], sp.part[j]) {
                    ((true, a), _) => d0[a] += v,
                    ((false, a), (false, b)) if a >= b => f[a * nf + b] += v,
                    _ => {}
                }
            }
        }
        let mut outer = |x: &[(usize, f64)], y: &[(usize, f64)], c: f64| {
            for &(p, xv) in x {
                let cx = c * xv;
                for &(q, yv) in y {
                    if p >= q {
                        f[p * nf + q] += cx * yv;
                    }
                }
            }
        };
        for &k in &sp.free_rows {
            outer(&sp.rest[k], &sp.rest[k], w[k]);
        }
        let mut dinv = vec![0.0; nd];
        let mut e = vec![0.0; nd * nf];
        for j in 0..nd {
            let rows = &sp.owned[j];
            let wc2: Vec<f64> = rows.iter().map(|&k| w[k] * sp.coef[k].powi(2)).collect();
            let d = d0[j] + wc2.iter().sum::<f64>();
            if !(d > 0.0) {
                continue;
            }
            dinv[j] = 1.0 / d;
            let total: f64 = wc2.iter().sum();
            for (r, &k) in rows.iter().enumerate() {
                let part = &sp.rest[k];
                let wc = w[k] * sp.coef[k];
                for &(b, v) in part {
                    e[j * nf + b] += wc * v;
                }
                if part.is_empty() {
                    continue;
                }
                // D − w_r c_r² without the subtraction when this row dominates.
                let others = if wc2[r] > 0.5 * total {
                    d0[j] + wc2.iter().enumerate().filter(|&(t, _)| t != r).map(|(_, v)| v).sum::<f64>()
                } else {
                    d - wc2[r]
                };
                outer(part, part, w[k] * others / d);
                for (r2, &k2) in rows.iter().enumerate() {
                    if r2 != r && !sp.rest[k2].is_empty() {
                        outer(part, &sp.rest[k2], -wc * w[k2] * sp.coef[k2] / d);
                    }
                }
            }
        }
        Factor::Schur { dinv, e, chol: Chol::factor(f, nf) }
    }

    fn solve(&self, mut rhs: Vec<f64>) -> Result<Vec<f64>, QpError> {
        match &self.factor {
            Factor::Schur { dinv, e, chol } => {
                let nf = chol.n;
                let mut rd = Vec::with_capacity(dinv.len());
                let mut rf = Vec::with_capacity(nf);
                for (i, &(diag, _)) in self.sp.part.iter().enumerate() {
                    if diag { rd.push(rhs[i]) } else { rf.push(rhs[i]) }
                }
                for (k, &di) in dinv.iter().enumerate() {
                    let t = di * rd[k];
                    if t != 0.0 {
                        for (r, ek) in rf.iter_mut().zip(&e[k * nf..(k + 1) * nf]) {
                            *r -= ek * t;
                        }
                    }
                }
                chol.solve(&mut rf);
                for (k, &di) in dinv.iter().enumerate() {
                    rd[k] = di * (rd[k] - dot(&e[k * nf..(k + 1) * nf], &rf));
                }
                for (i, &(diag, k)) in self.sp.part.iter().enumerate() {
                    rhs[i] = if diag { rd[k] } else { rf[k] };
                }
            }
            Factor::Lu(lu) => {
                let v = lu
                    .solve(&DVector::from_vec(rhs))
                    .ok_or_else(|| QpError::Degenerate("singular KKT matrix".into()))?;
                rhs = v.as_slice().to_vec();
            }
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("Newton step"));
        }
        Ok(rhs)
    }

    /// Solves the Newton system for residuals `(rd, rp, re, rc)` and returns
    /// `(dx, dy, dz, ds)`.
    #[allow(clippy::type_complexity)]
    fn step(
        &self,
        s: &[f64],
        rd: &[f64],
        rp: &[f64],
        re: &[f64],
        rc: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), QpError> {
        let (qp, sp, w) = (self.qp, self.sp, &self.w);
        let (n, m, pe) = (qp.n, qp.m(), qp.p_eq());
        // ds = −rp − G dx, dz = W G dx + (Z rp − rc) / S.
        let t: Vec<f64> = (0..m).map(|k| w[k] * rp[k] - rc[k] / s[k]).collect();
        let mut rhs = vec![0.0; n + pe];
        for i in 0..n {
            rhs[i] = -rd[i];
        }
        let mut gt = vec![0.0; n];
        sp.gt_add(&t, &mut gt);
        for i in 0..n {
            rhs[i] -= gt[i];
        }
        for k in 0..pe {
            rhs[n + k] = -re[k];
        }
        let sol = self.solve(rhs)?;
        let mut dx = sol[..n].to_vec();
        let mut dy = sol[n..].to_vec();
        let mut dz = vec![0.0; m];
        let mut ds = vec![0.0; m];
        for k in 0..m {
            let gdx = sp.g_dot(k, &dx);
            ds[k] = -rp[k] - gdx;
            dz[k] = w[k] * gdx + t[k];
        }
        // Iterative refinement against the unreduced stationarity rows; the
        // other Newton rows hold exactly by construction of ds and dz. Stops
        // once the residual no longer halves.
        let floor = 1e-15 * (1.0 + rd.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        let mut last = f64::INFINITY;
        for _ in 0..6 {
            let pdx = sp.p_mul(&dx);
            let mut rhs = vec![0.0; n + pe];
            for i in 0..n {
                rhs[i] = -(pdx[i] + rd[i]);
            }
            let mut gz = vec![0.0; n];
            sp.gt_add(&dz, &mut gz);
            for i in 0..n {
                rhs[i] -= gz[i];
            }
            for k in 0..pe {
                let row = &qp.a[k * n..(k + 1) * n];
                for j in 0..n {
                    rhs[j] -= row[j] * dy[k];
                }
                rhs[n + k] = -(dot(row, &dx) + re[k]);
            }
            let res = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if res <= floor || res > 0.5 * last {
                break;
            }
            last = res;
            let corr = self.solve(rhs)?;
            for j in 0..n {
                dx[j] += corr[j];
            }
            for k in 0..pe {
                dy[k] += corr[n + k];
            }
            for k in 0..m {
                let gc = sp.g_dot(k, &corr);
                ds[k] -= gc;
                dz[k] += w[k] * gc;
            }
        }
        Ok((dx, dy, dz, ds))
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(a, d)| -a / d)
        .fold(1.0, f64::min)
}

/// Mehrotra predictor-corrector interior-point method.
///
/// Inequality rows are equilibrated to unit max-norm before iterating; the
/// returned multipliers and slacks refer to the original rows.
pub fn solve_qp(qp: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let n = qp.n;
    let e: Vec<f64> = (0..qp.m())
        .map(|k| {
            let r = qp.g_row(k).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if r > 0.0 { 1.0 / r } else { 1.0 }
        })
        .collect();
    let mut scaled = qp.clone();
    for (k, &ek) in e.iter().enumerate() {
        scaled.g[k * n..(k + 1) * n].iter_mut().for_each(|v| *v *= ek);
        scaled.h[k] *= ek;
    }
    let mut sol = solve_scaled(&scaled, &qp.h, &e, settings)?;
    for (k, &ek) in e.iter().enumerate() {
        sol.s[k] /= ek;
        sol.z[k] *= ek;
    }
    Ok(sol)
}

/// Iterates on the row-scaled problem; `h_orig` and `e` express the primal
/// residual and its tolerance in the original row units.
fn solve_scaled(qp: &QpProblem, h_orig: &[f64], e: &[f64], settings: &QpSettings) -> Result<QpSolution, QpError> {
    let (n, m, pe) = (qp.n, qp.m(), qp.p_eq());
    let sp = Sparse::new(qp);

    // Start: x minimizes ½xᵀPx + qᵀx + ½‖Gx − h‖² subject to Ax = b, and the
    // residual r = Gx − h seeds s = −r and z = r, shifted positive and then
    // balanced so that no product s_i z_i starts far from the others.
    let ones = vec![1.0; m];
    let newton = Newton::new(qp, &sp, ones.clone());
    let neg_h: Vec<f64> = qp.h.iter().map(|v| -v).collect();
    let neg_b: Vec<f64> = qp.b.iter().map(|v| -v).collect();
    let (x0, y0, _, _) = newton.step(&ones, &qp.q, &neg_h, &neg_b, &vec![0.0; m])?;
    let mut x = x0;
    let mut y = y0;
    let r: Vec<f64> = (0..m).map(|k| sp.g_dot(k, &x) - qp.h[k]).collect();
    let mut s: Vec<f64> = r.iter().map(|v| -v).collect();
    let mut z = r;
    for v in [&mut s, &mut z] {
        let lift = (-1.5 * v.iter().cloned().fold(f64::INFINITY, f64::min)).max(0.0);
        v.iter_mut().for_each(|e| *e += lift);
    }
    let sz = dot(&s, &z);
    let (sum_s, sum_z) = (s.iter().sum::<f64>(), z.iter().sum::<f64>());
    let ds0 = if sum_z > 0.0 { 0.5 * sz / sum_z } else { 0.0 };
    let dz0 = if sum_s > 0.0 { 0.5 * sz / sum_s } else { 0.0 };
    s.iter_mut().for_each(|e| *e = (*e + ds0).max(1e-8));
    z.iter_mut().for_each(|e| *e = (*e + dz0).max(1e-8));

    // Feasibility tolerances are relative to the data magnitude.
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let scale_p = 1.0 + inf_norm(h_orig).max(inf_norm(&qp.b));
    let scale_d = 1.0 + inf_norm(&qp.q);
    let mut residuals = KktResiduals { primal: f64::INFINITY, dual: f64::INFINITY, gap: f64::INFINITY };
    for iter in 0..=settings.max_iter {
        let mut rd = sp.p_mul(&x);
        for i in 0..n {
            rd[i] += qp.q[i];
        }
        sp.gt_add(&z, &mut rd);
        let rp: Vec<f64> = (0..m).map(|k| sp.g_dot(k, &x) + s[k] - qp.h[k]).collect();
        let mut re = vec![0.0; pe];
        for k in 0..pe {
            let row = &qp.a[k * n..(k + 1) * n];
            for j in 0..n {
                rd[j] += row[j] * y[k];
            }
            re[k] = dot(row, &x) - qp.b[k];
        }
        let mu = if m > 0 { dot(&s, &z) / m as f64 } else { 0.0 };
        residuals = KktResiduals {
            primal: rp.iter().zip(e).map(|(r, ek)| r / ek).chain(re.iter().copied()).fold(0.0, |a, v| a.max(v.abs())),
            dual: inf_norm(&rd),
            gap: s.iter().zip(&z).map(|(a, b)| a * b).fold(0.0, f64::max),
        };
        if !(residuals.primal.is_finite() && residuals.dual.is_finite() && residuals.gap.is_finite()) {
            return Err(QpError::NonFinite("iterate"));
        }
        if residuals.primal < settings.tol * scale_p
            && residuals.dual < settings.tol * scale_d
            && residuals.gap < settings.tol
        {
            return Ok(QpSolution { x, y, z, s, iterations: iter, residuals });
        }
        if iter == settings.max_iter {
            break;
        }

        let newton = Newton::new(qp, &sp, (0..m).map(|k| z[k] / s[k]).collect());
        // Affine predictor.
        let rc_aff: Vec<f64> = (0..m).map(|k| s[k] * z[k]).collect();
        let (_, _, dz_a, ds_a) = newton.step(&s, &rd, &rp, &re, &rc_aff)?;
        let alpha_a = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = if m > 0 {
            (0..m)
                .map(|k| (s[k] + alpha_a * ds_a[k]) * (z[k] + alpha_a * dz_a[k]))
                .sum::<f64>()
                / m as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).min(1.0) } else { 0.0 };
        // Centering-corrector.
        let rc: Vec<f64> = (0..m)
            .map(|k| s[k] * z[k] + ds_a[k] * dz_a[k] - sigma * mu)
            .collect();
        let (dx, dy, dz, ds) = newton.step(&s, &rd, &rp, &re, &rc)?;
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        for j in 0..n {
            x[j] += alpha * dx[j];
        }
        for k in 0..pe {
            y[k] += alpha * dy[k];
        }
        for k in 0..m {
            s[k] = (s[k] + alpha * ds[k]).max(1e-300);
            z[k] = (z[k] + alpha * dz[k]).max(1e-300);
        }
    }
    Err(QpError::IterationCap { iterations: settings.max_iter, residuals })
}
