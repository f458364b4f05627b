//! Second-method QP solver for cross-checking the interior-point solver:
//! operator-splitting ADMM on `l ≤ Cx ≤ u`, followed by an exact KKT solve on
//! the active set found by ADMM.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use shac_koopman::mpc_layer::QpProblem;

pub struct OracleSolution {
    pub x: Vec<f64>,
    pub polished: bool,
}

pub fn admm_solve(qp: &QpProblem) -> OracleSolution {
    let n = qp.n;
    let (m, pe) = (qp.m(), qp.p_eq());
    let rows = m + pe;
    let p = DMatrix::from_row_slice(n, n, &qp.p);
    let mut c = DMatrix::zeros(rows, n);
    let mut lo = DVector::from_element(rows, f64::NEG_INFINITY);
    let mut hi = DVector::zeros(rows);
    for k in 0..m {
        for j in 0..n {
            c[(k, j)] = qp.g[k * n + j];
        }
        hi[k] = qp.h[k];
    }
    for k in 0..pe {
        for j in 0..n {
            c[(m + k, j)] = qp.a[k * n + j];
        }
        lo[m + k] = qp.b[k];
        hi[m + k] = qp.b[k];
    }
    let q = DVector::from_row_slice(&qp.q);
    let (rho, sigma, alpha) = (0.1, 1e-6, 1.6);
    let rho_vec: DVector<f64> = DVector::from_fn(rows, |k, _| if k >= m { 1e3 * rho } else { rho });
    let kkt = &p + DMatrix::identity(n, n) * sigma + c.transpose() * DMatrix::from_diagonal(&rho_vec) * &c;
    let chol = kkt.cholesky().expect("ADMM matrix is positive definite");
    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(rows);
    let mut y = DVector::zeros(rows);
    for _ in 0..200_000 {
        let rhs = &x * sigma - &q + c.transpose() * (rho_vec.component_mul(&z) - &y);
        let xt = chol.solve(&rhs);
        let zt = &c * &xt;
        let x_new = &xt * alpha + &x * (1.0 - alpha);
        let z_relax = &zt * alpha + &z * (1.0 - alpha);
        let z_new = DVector::from_fn(rows, |k, _| (z_relax[k] + y[k] / rho_vec[k]).clamp(lo[k], hi[k]));
        y += rho_vec.component_mul(&(z_relax - &z_new));
        x = x_new;
        z = z_new;
        let r_prim = (&c * &x - &z).amax();
        let r_dual = (&p * &x + &q + c.transpose() * &y).amax();
        if r_prim < 1e-11 && r_dual < 1e-11 {
            break;
        }
    }
    // Active rows: equalities and inequalities with a positive multiplier.
    let active: Vec<usize> = (0..rows).filter(|&k| k >= m || y[k] > 1e-9).collect();
    if let Some(xp) = polish(&p, &q, &c, &hi, &active, m) {
        return OracleSolution { x: xp, polished: true };
    }
    OracleSolution {
        x: x.iter().copied().collect(),
        polished: false,
    }
}

/// Solves the equality-constrained KKT system on `active` and accepts the
/// point when it is primal feasible with non-negative inequality multipliers.
fn polish(p: &DMatrix<f64>, q: &DVector<f64>, c: &DMatrix<f64>, hi: &DVector<f64>, active: &[usize], m: usize) -> Option<Vec<f64>> {
    let n = p.nrows();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-q));
    for (i, &row) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + i, j)] = c[(row, j)];
            kkt[(j, n + i)] = c[(row, j)];
        }
        rhs[n + i] = hi[row];
    }
    let sol = kkt.lu().solve(&rhs)?;
    let x = sol.rows(0, n).into_owned();
    let cx = c * &x;
    let feasible = (0..m).all(|r| cx[r] <= hi[r] + 1e-10);
    let dual_ok = active.iter().enumerate().all(|(i, &row)| row >= m || sol[n + i] >= -1e-10);
    (feasible && dual_ok).then(|| x.iter().copied().collect())
}

/// Random strictly convex QP with a strictly feasible point.
pub fn random_qp(n: usize, m: usize, p_eq: usize, rng: &mut impl Rng) -> QpProblem {
    let l: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>() / n as f64;
        }
        p[i * n + i] += 0.1;
    }
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let g: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..m)
        .map(|k| (0..n).map(|j| g[k * n + j] * x0[j]).sum::<f64>() + rng.random_range(0.05..0.5))
        .collect();
    let a: Vec<f64> = (0..p_eq * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..p_eq).map(|k| (0..n).map(|j| a[k * n + j] * x0[j]).sum()).collect();
    QpProblem::with_equalities(p, q, g, h, a, b).unwrap()
}
