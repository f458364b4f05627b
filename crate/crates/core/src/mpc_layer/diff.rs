//! Implicit differentiation of the QP solution map through the KKT conditions
//! of the active set.

use nalgebra::{DMatrix, DVector};

use super::qp::{QpProblem, QpSolution};
use crate::adgraph::{CustomOp, Tensor};
use crate::error::{GraphError, QpError};

/// Tikhonov shift on the constraint block of the adjoint KKT matrix.
pub const ADJOINT_REG: f64 = 1e-9;

/// Gradients of a scalar loss with respect to every QP data entry.
#[derive(Clone, Debug, PartialEq)]
pub struct QpGrads {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Given `dL/dx*`, returns `dL/d(P, q, G, h, A, b)`.
///
/// With the active rows `G_a x = h_a` and the equalities, the solution map is
/// smooth near a strictly complementary solution. The adjoint system
/// `[P G_aᵀ Aᵀ; G_a 0 0; A 0 0] w = [g; 0; 0]` is solved once, and the data
/// gradients follow by the chain rule on the stationarity and feasibility
/// conditions. Rows with a single nonzero (bounds) are eliminated directly.
pub fn diff_qp(qp: &QpProblem, sol: &QpSolution, grad_x: &[f64]) -> Result<QpGrads, QpError> {
    let n = qp.n;
    let active = sol.active_set();
    let pe = qp.p_eq();

    // Active bound rows fix one coordinate each: dx_j = 0 on the reduced system.
    let mut fixed = vec![false; n];
    let mut general = Vec::new();
    for &k in &active {
        let row = qp.g_row(k);
        let mut nz = row.iter().enumerate().filter(|(_, v)| **v != 0.0);
        match (nz.next(), nz.next()) {
            (Some((j, _)), None) if !fixed[j] => fixed[j] = true,
            _ => general.push(k),
        }
    }
    let free: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
    let nf = free.len();
    let dim = nf + general.len() + pe;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = qp.p[i * n + j];
        }
    }
    let rows: Vec<&[f64]> = general
        .iter()
        .map(|&k| qp.g_row(k))
        .chain((0..pe).map(|k| &qp.a[k * n..(k + 1) * n]))
        .collect();
    for (r, row) in rows.iter().enumerate() {
        for (a, &j) in free.iter().enumerate() {
            kkt[(nf + r, a)] = row[j];
            kkt[(a, nf + r)] = row[j];
        }
        kkt[(nf + r, nf + r)] = -ADJOINT_REG;
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    for (a, &j) in free.iter().enumerate() {
        rhs[a] = grad_x[j];
    }
    let w = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| QpError::Degenerate("singular adjoint KKT system".into()))?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(QpError::Degenerate("non-finite adjoint solution".into()));
    }

    // Primal adjoint on all coordinates (zero on fixed ones) and multiplier
    // adjoints for every active or equality row.
    let mut wx = vec![0.0; n];
    for (a, &j) in free.iter().enumerate() {
        wx[j] = w[a];
    }
    let mut wz = vec![0.0; qp.m()];
    for (r, &k) in general.iter().enumerate() {
        wz[k] = w[nf + r];
    }
    let wy: Vec<f64> = (0..pe).map(|k| w[nf + general.len() + k]).collect();
    // Bound rows: stationarity on the fixed coordinate gives the multiplier adjoint.
    for &k in &active {
        let row = qp.g_row(k);
        let nz: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
        if nz.len() == 1 && fixed[nz[0]] && !general.contains(&k) {
            let j = nz[0];
            let mut r = grad_x[j];
            for i in 0..n {
                r -= qp.p[j * n + i] * wx[i];
            }
            for (gk, &wzk) in wz.iter().enumerate() {
                if wzk != 0.0 && gk != k {
                    r -= qp.g[gk * n + j] * wzk;
                }
            }
            for (e, &wye) in wy.iter().enumerate() {
                r -= qp.a[e * n + j] * wye;
            }
            wz[k] = r / row[j];
        }
    }

    let mut out = QpGrads {
        p: vec![0.0; n * n],
        q: wx.iter().map(|v| -v).collect(),
        g: vec![0.0; qp.g.len()],
        h: wz.clone(),
        a: vec![0.0; qp.a.len()],
        b: wy.clone(),
    };
    let x = &sol.x;
    for i in 0..n {
        for j in 0..n {
            out.p[i * n + j] = -0.5 * (wx[i] * x[j] + x[i] * wx[j]);
        }
    }
    for k in 0..qp.m() {
        if wz[k] == 0.0 && sol.z[k] == 0.0 {
            continue;
        }
        let lam = if active.binary_search(&k).is_ok() { sol.z[k] } else { 0.0 };
        for j in 0..n {
            out.g[k * n + j] = -(lam * wx[j] + wz[k] * x[j]);
        }
    }
    for e in 0..pe {
        for j in 0..n {
            out.a[e * n + j] = -(sol.y[e] * wx[j] + wy[e] * x[j]);
        }
    }
    Ok(out)
}

/// Tape node wrapping the QP solution map `(P, q, G, h) ↦ x*`.
pub struct QpOp {
    pub problem: QpProblem,
    pub solution: QpSolution,
}

impl CustomOp for QpOp {
    fn name(&self) -> &'static str {
        "qp"
    }

    fn vjp(&self, _inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>, GraphError> {
        let g = diff_qp(&self.problem, &self.solution, grad_output.data()).map_err(|e| GraphError::Custom {
            op: "qp",
            msg: e.to_string(),
        })?;
        let n = self.problem.n;
        let m = self.problem.m();
        Ok(vec![
            Tensor::matrix(n, n, g.p),
            Tensor::vector(g.q),
            Tensor::matrix(m, n, g.g),
            Tensor::vector(g.h),
        ])
    }
}
