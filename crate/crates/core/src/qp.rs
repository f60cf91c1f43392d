//! Dense strictly convex QP kernel.
//!
//! Solves min ½ yᵀH y + gᵀy subject to A y ≤ b with H positive definite,
//! by a dual active-set method. The iteration starts at the unconstrained
//! minimum (always defined for PD H), adds the most violated constraint,
//! and maintains dual feasibility throughout, so primal infeasibility is
//! detected exactly when a violated constraint cannot be entered.
//!
//! The hot path in the controller solves many QPs that share H and A and
//! differ only in g and b, so the kernel also accepts a prefactored H.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("constraint system is infeasible")]
    Infeasible,
    #[error("iteration limit reached")]
    MaxIterations,
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
}

/// min ½ yᵀH y + gᵀy  s.t.  A y ≤ b.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub y: DVector<f64>,
    /// Multipliers for every constraint row (zero on inactive rows).
    pub mu: DVector<f64>,
    /// Indices of rows in the final working set.
    pub active: Vec<usize>,
}

/// Hessian factor and constraint matrix shared across many solves.
pub struct QpShape {
    pub chol: Cholesky<f64, Dyn>,
    pub a: DMatrix<f64>,
}

impl QpShape {
    pub fn new(h: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self, QpError> {
        let chol = Cholesky::new(h).ok_or(QpError::NotPositiveDefinite)?;
        Ok(Self { chol, a })
    }
}

/// Direction-degeneracy threshold: below this the new constraint normal is
/// linearly dependent on the working set.
const Z_TOL: f64 = 1e-11;
const MAX_ITER: usize = 10_000;

/// Cold-start solve.
pub fn solve_dense_qp(qp: &DenseQp, tol: f64) -> Result<QpSolution, QpError> {
    solve_dense_qp_warm(qp, tol, &[])
}

/// Warm-started solve: `warm_active` is tried as the initial working set.
/// If its equality-constrained KKT point is primal and dual feasible it is
/// returned immediately; otherwise the dual iteration proceeds from the
/// unconstrained minimum.
pub fn solve_dense_qp_warm(
    qp: &DenseQp,
    tol: f64,
    warm_active: &[usize],
) -> Result<QpSolution, QpError> {
    debug_assert_eq!(qp.g.len(), qp.h.nrows());
    debug_assert_eq!(qp.a.nrows(), qp.b.len());
    let chol = Cholesky::new(qp.h.clone()).ok_or(QpError::NotPositiveDefinite)?;
    solve_shaped_parts(&chol, &qp.a, &qp.g, &qp.b, tol, warm_active)
}

/// Solve with shared (H factor, A) and per-instance (g, b).
pub fn solve_shaped(
    shape: &QpShape,
    g: &DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    warm_active: &[usize],
) -> Result<QpSolution, QpError> {
    solve_shaped_parts(&shape.chol, &shape.a, g, b, tol, warm_active)
}

fn solve_shaped_parts(
    chol: &Cholesky<f64, Dyn>,
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    warm_active: &[usize],
) -> Result<QpSolution, QpError> {
    if !warm_active.is_empty() {
        if let Some(sol) = try_active_set(chol, a, g, b, warm_active, tol) {
            return Ok(sol);
        }
    }

    let mut y = -chol.solve(g);
    // Working set: row indices, their H⁻¹aᵀ columns, their multipliers.
    let mut w: Vec<usize> = Vec::new();
    let mut hg: Vec<DVector<f64>> = Vec::new();
    let mut mu_w: Vec<f64> = Vec::new();

    for _ in 0..MAX_ITER {
        // Most violated constraint.
        let resid = a * &y - b;
        let mut p = None;
        let mut worst = tol;
        for (i, v) in resid.iter().enumerate() {
            if *v > worst && !w.contains(&i) {
                worst = *v;
                p = Some(i);
            }
        }
        let Some(p) = p else {
            let mut mu = DVector::zeros(b.len());
            for (j, &wj) in w.iter().enumerate() {
                mu[wj] = mu_w[j].max(0.0);
            }
            return Ok(QpSolution { y, mu, active: w });
        };

        let normal = a.row(p).transpose();
        let mut mu_p = 0.0;
        // Inner loop: take partial (dual) and full (primal) steps until
        // constraint p enters the working set or infeasibility shows.
        let mut guard = 0;
        loop {
            guard += 1;
            if guard > MAX_ITER {
                return Err(QpError::MaxIterations);
            }
            let hn = chol.solve(&normal);
            // Solve M r = A_W hn with M = A_W H⁻¹ A_Wᵀ.
            let r = if w.is_empty() {
                DVector::zeros(0)
            } else {
                let k = w.len();
                let mut m = DMatrix::zeros(k, k);
                let mut rhs = DVector::zeros(k);
                for (i, &wi) in w.iter().enumerate() {
                    let ai = a.row(wi);
                    for (j, hgj) in hg.iter().enumerate() {
                        m[(i, j)] = (ai * hgj)[(0, 0)];
                    }
                    rhs[i] = (ai * &hn)[(0, 0)];
                }
                m.lu().solve(&rhs).ok_or(QpError::MaxIterations)?
            };
            let mut z = hn.clone();
            for (j, hgj) in hg.iter().enumerate() {
                z -= hgj * r[j];
            }
            let ntz = normal.dot(&z);

            // Dual blocking step length.
            let mut t1 = f64::INFINITY;
            let mut blocker = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > Z_TOL {
                    let t = mu_w[j] / rj;
                    if t < t1 {
                        t1 = t;
                        blocker = Some(j);
                    }
                }
            }

            if ntz <= Z_TOL * (1.0 + normal.norm_squared()) {
                // Normal lies in the span of the working set.
                if blocker.is_none() {
                    return Err(QpError::Infeasible);
                }
                let j = blocker.unwrap();
                for (k, rj) in r.iter().enumerate() {
                    mu_w[k] -= t1 * rj;
                }
                mu_p += t1;
                w.remove(j);
                hg.remove(j);
                mu_w.remove(j);
                continue;
            }

            let s_p = a.row(p).transpose().dot(&y) - b[p];
            let t2 = s_p / ntz;
            let t = t1.min(t2);
            y -= &z * t;
            for (k, rj) in r.iter().enumerate() {
                mu_w[k] -= t * rj;
            }
            mu_p += t;
            if t2 <= t1 {
                // Constraint p becomes active.
                w.push(p);
                hg.push(hn);
                mu_w.push(mu_p);
                break;
            }
            let j = blocker.expect("t1 finite implies a blocking index");
            w.remove(j);
            hg.remove(j);
            mu_w.remove(j);
        }
    }
    Err(QpError::MaxIterations)
}

/// Solve the KKT system treating `active` as equalities; accept only if the
/// point is primal feasible on all rows and dual feasible on the set.
fn try_active_set(
    chol: &Cholesky<f64, Dyn>,
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    b: &DVector<f64>,
    active: &[usize],
    tol: f64,
) -> Option<QpSolution> {
    let y0 = -chol.solve(g);
    if active.is_empty() {
        let resid = a * &y0 - b;
        if resid.iter().any(|v| *v > tol) {
            return None;
        }
        return Some(QpSolution {
            y: y0,
            mu: DVector::zeros(b.len()),
            active: Vec::new(),
        });
    }
    let k = active.len();
    let hg: Vec<DVector<f64>> = active
        .iter()
        .map(|&i| chol.solve(&a.row(i).transpose()))
        .collect();
    // A_W y = b_W with y = y0 - Σ hg_j μ_j gives M μ = A_W y0 - b_W.
    let mut m = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (i, &wi) in active.iter().enumerate() {
        let ai = a.row(wi);
        for (j, hgj) in hg.iter().enumerate() {
            m[(i, j)] = (ai * hgj)[(0, 0)];
        }
        rhs[i] = (ai * &y0)[(0, 0)] - b[wi];
    }
    let mu_w = m.lu().solve(&rhs)?;
    if mu_w.iter().any(|v| *v < -tol) {
        return None;
    }
    let mut y = y0;
    for (j, hgj) in hg.iter().enumerate() {
        y -= hgj * mu_w[j];
    }
    let resid = a * &y - b;
    if resid.iter().any(|v| *v > tol) {
        return None;
    }
    let mut mu = DVector::zeros(b.len());
    for (j, &wj) in active.iter().enumerate() {
        mu[wj] = mu_w[j].max(0.0);
    }
    Some(QpSolution {
        y,
        mu,
        active: active.to_vec(),
    })
}
