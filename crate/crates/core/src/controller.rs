//! The fixed-iteration real-time loop.
//!
//! Each control step performs m̄ inner rounds of {parallel stage solves →
//! consensus → co-state update λ ← λ + δ}, applies the first stage input,
//! and shifts the iterate. In tightened mode the stage problems carry the
//! per-stage margins, which is what makes the loop recursively feasible;
//! in input-only mode they carry the raw input bounds only.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use thiserror::Error;

use crate::contraction::TightenedMargins;
use crate::model::{LtiSystem, MpcProblem};
use crate::qp::{solve_shaped, QpError};
use crate::stage::{initial_lin, solve_stage_terminal, stage_lin, ConsensusCache, StageShapes};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("stage {stage} problem infeasible")]
    StageInfeasible { stage: usize },
    #[error("stage {stage} solver failed: {source}")]
    StageFailed { stage: usize, source: QpError },
}

/// Primal-dual iterate carried across control steps.
#[derive(Debug, Clone)]
pub struct IterateTriple {
    /// State guesses z_0 … z_N.
    pub z: Vec<DVector<f64>>,
    /// Input guesses v_0 … v_{N−1}.
    pub v: Vec<DVector<f64>>,
    /// Co-state guesses λ_0 … λ_{N−1}.
    pub lambda: Vec<DVector<f64>>,
}

impl IterateTriple {
    pub fn zeros(n_x: usize, n_u: usize, horizon: usize) -> Self {
        Self {
            z: vec![DVector::zeros(n_x); horizon + 1],
            v: vec![DVector::zeros(n_u); horizon],
            lambda: vec![DVector::zeros(n_x); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.v.len()
    }
}

/// Which inequality rows the stage problems enforce.
#[derive(Debug, Clone)]
pub enum ConstraintProfile {
    /// Raw input bounds only; no feasibility guarantee (heuristic baseline).
    InputOnly,
    /// Per-stage tightened state and input bounds.
    Tightened(TightenedMargins),
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    /// Inner iterations per control step.
    pub m_bar: usize,
    pub qp_tol: f64,
    pub profile: ConstraintProfile,
}

/// Per-inner-iteration diagnostic record.
#[derive(Debug, Clone)]
pub struct IterDiag {
    pub m: usize,
    /// Total active-set size across all stage problems.
    pub total_active: usize,
}

impl IterDiag {
    pub const CSV_HEADER: &'static str = "m,total_active";

    pub fn csv_row(&self) -> String {
        format!("{},{}", self.m, self.total_active)
    }
}

enum StageOut {
    Initial {
        u0: DVector<f64>,
        active: Vec<usize>,
    },
    Middle {
        x: DVector<f64>,
        u: DVector<f64>,
        active: Vec<usize>,
    },
}

pub struct RtiController {
    pub problem: MpcProblem,
    pub config: ControllerConfig,
    cache: ConsensusCache,
    shapes: StageShapes,
    p_chol: Cholesky<f64, Dyn>,
    /// Previous active set per stage 0..N−1, reused as warm starts.
    warm: Vec<Vec<usize>>,
}

impl RtiController {
    pub fn new(problem: MpcProblem, config: ControllerConfig) -> Self {
        assert!(config.m_bar >= 1);
        if let ConstraintProfile::Tightened(m) = &config.profile {
            assert_eq!(m.horizon(), problem.horizon, "margin horizon mismatch");
        }
        let cache = ConsensusCache::new(
            &problem.system,
            &problem.q,
            &problem.r,
            &problem.p,
            problem.horizon,
        );
        let margins = match &config.profile {
            ConstraintProfile::InputOnly => None,
            ConstraintProfile::Tightened(m) => Some(m),
        };
        let shapes = StageShapes::new(
            &problem.system,
            &problem.q,
            &problem.r,
            &problem.x_set,
            &problem.u_set,
            margins,
            problem.horizon,
        );
        let p_chol = Cholesky::new(crate::linalg::symmetrize(&problem.p)).expect("P must be PD");
        let warm = vec![Vec::new(); problem.horizon];
        Self {
            problem,
            config,
            cache,
            shapes,
            p_chol,
            warm,
        }
    }

    /// One control step: m̄ inner rounds, returning the input to apply
    /// (the first stage input of the final round), the post-consensus
    /// iterate to carry forward, and per-round diagnostics.
    pub fn rti_step(
        &mut self,
        iterate: &IterateTriple,
        x_hat: &DVector<f64>,
    ) -> Result<(DVector<f64>, IterateTriple, Vec<IterDiag>), ControllerError> {
        let mut cur = iterate.clone();
        let mut diags = Vec::with_capacity(self.config.m_bar);
        let mut applied = DVector::zeros(self.problem.n_u());
        let b_init = self.shapes.init_rhs(x_hat);
        for m in 0..self.config.m_bar {
            let (x_stage, u_stage, total_active) = self.solve_stages(&cur, &b_init)?;
            applied = u_stage[0].clone();
            let cons = crate::stage::solve_consensus(
                &self.cache,
                &self.problem.system,
                &self.problem.q,
                &self.problem.r,
                &x_stage,
                &u_stage,
                &cur.z,
                &cur.v,
                x_hat,
            );
            cur.z = cons.z_plus;
            cur.v = cons.v_plus;
            for (lam, d) in cur.lambda.iter_mut().zip(&cons.delta) {
                *lam += d;
            }
            diags.push(IterDiag { m, total_active });
        }
        Ok((applied, cur, diags))
    }

    /// Parallel decoupled solves. Returns x_1..x_N, u_0..u_{N−1} and the
    /// summed active-set size. Stage indices map to slots so the result is
    /// independent of the worker count.
    #[allow(clippy::type_complexity)]
    fn solve_stages(
        &mut self,
        cur: &IterateTriple,
        b_init: &DVector<f64>,
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, usize), ControllerError> {
        let n = self.problem.horizon;
        let nx = self.problem.n_x();
        let sys = &self.problem.system;
        let tol = self.config.qp_tol;
        let warm = &self.warm;
        let shapes = &self.shapes;
        let outs: Vec<Result<StageOut, ControllerError>> = (0..n)
            .into_par_iter()
            .map(|k| {
                if k == 0 {
                    let g = initial_lin(&cur.lambda[0], &cur.v[0], sys, &self.problem.r);
                    solve_shaped(&shapes.init, &g, b_init, tol, &warm[0])
                        .map(|sol| StageOut::Initial {
                            u0: sol.y,
                            active: sol.active,
                        })
                        .map_err(|e| stage_err(0, e))
                } else {
                    let g = stage_lin(
                        &cur.lambda[k - 1],
                        &cur.lambda[k],
                        &cur.z[k],
                        &cur.v[k],
                        sys,
                        &self.problem.q,
                        &self.problem.r,
                    );
                    solve_shaped(&shapes.mid, &g, &shapes.b_mid[k - 1], tol, &warm[k])
                        .map(|sol| StageOut::Middle {
                            x: sol.y.rows(0, nx).into_owned(),
                            u: sol.y.rows(nx, sol.y.len() - nx).into_owned(),
                            active: sol.active,
                        })
                        .map_err(|e| stage_err(k, e))
                }
            })
            .collect();

        let mut x_stage = Vec::with_capacity(n);
        let mut u_stage = Vec::with_capacity(n);
        let mut total_active = 0;
        for (k, out) in outs.into_iter().enumerate() {
            match out? {
                StageOut::Initial { u0, active } => {
                    u_stage.push(u0);
                    total_active += active.len();
                    self.warm[k] = active;
                }
                StageOut::Middle { x, u, active } => {
                    x_stage.push(x);
                    u_stage.push(u);
                    total_active += active.len();
                    self.warm[k] = active;
                }
            }
        }
        let x_n = solve_stage_terminal(&cur.lambda[n - 1], &cur.z[n], &self.p_chol);
        x_stage.push(x_n);
        Ok((x_stage, u_stage, total_active))
    }
}

fn stage_err(stage: usize, e: QpError) -> ControllerError {
    match e {
        QpError::Infeasible => ControllerError::StageInfeasible { stage },
        other => ControllerError::StageFailed {
            stage,
            source: other,
        },
    }
}

/// Shift the iterate one step: drop the head, pad with zeros.
pub fn shift(iterate: &IterateTriple) -> IterateTriple {
    let n = iterate.horizon();
    let nx = iterate.z[0].len();
    let nu = iterate.v[0].len();
    let mut z: Vec<DVector<f64>> = iterate.z[1..].to_vec();
    z.push(DVector::zeros(nx));
    let mut v: Vec<DVector<f64>> = iterate.v[1..].to_vec();
    v.push(DVector::zeros(nu));
    let mut lambda: Vec<DVector<f64>> = iterate.lambda[1..].to_vec();
    lambda.push(DVector::zeros(nx));
    debug_assert_eq!(z.len(), n + 1);
    IterateTriple { z, v, lambda }
}

/// The convergence potential: primal quadratic cost of (z, v) plus the
/// quarter-weighted dual residual terms of λ.
pub fn phi(
    z: &[DVector<f64>],
    v: &[DVector<f64>],
    lambda: &[DVector<f64>],
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    p_w: &DMatrix<f64>,
    system: &LtiSystem,
) -> f64 {
    let n = v.len();
    assert_eq!(z.len(), n + 1);
    assert_eq!(lambda.len(), n);
    let q_chol = Cholesky::new(crate::linalg::symmetrize(q_w)).expect("Q PD");
    let r_chol = Cholesky::new(crate::linalg::symmetrize(r_w)).expect("R PD");
    let p_chol = Cholesky::new(crate::linalg::symmetrize(p_w)).expect("P PD");
    let mut total = 0.0;
    for k in 0..n {
        total += z[k].dot(&(q_w * &z[k]));
        total += v[k].dot(&(r_w * &v[k]));
    }
    total += z[n].dot(&(p_w * &z[n]));
    let mut dual = 0.0;
    for lam in lambda {
        let btl = system.b.transpose() * lam;
        dual += btl.dot(&r_chol.solve(&btl));
    }
    for k in 1..n {
        let resid = &lambda[k - 1] - system.a.transpose() * &lambda[k];
        dual += resid.dot(&q_chol.solve(&resid));
    }
    dual += lambda[n - 1].dot(&p_chol.solve(&lambda[n - 1]));
    total + 0.25 * dual
}

/// Distance of an iterate from a reference solution, measured in Φ applied
/// to the componentwise difference.
pub fn delta(
    iterate: &IterateTriple,
    reference: &IterateTriple,
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    p_w: &DMatrix<f64>,
    system: &LtiSystem,
) -> f64 {
    let dz: Vec<DVector<f64>> = iterate
        .z
        .iter()
        .zip(&reference.z)
        .map(|(a, b)| a - b)
        .collect();
    let dv: Vec<DVector<f64>> = iterate
        .v
        .iter()
        .zip(&reference.v)
        .map(|(a, b)| a - b)
        .collect();
    let dl: Vec<DVector<f64>> = iterate
        .lambda
        .iter()
        .zip(&reference.lambda)
        .map(|(a, b)| a - b)
        .collect();
    phi(&dz, &dv, &dl, q_w, r_w, p_w, system)
}

#[derive(Debug, Error)]
pub enum KappaError {
    #[error("need at least 3 strictly positive values, got {0}")]
    TooFewSamples(usize),
    #[error("fitted ratio {0} is not contracting")]
    NotContracting(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct KappaFit {
    /// Per-iteration geometric decay factor of Δ.
    pub kappa: f64,
    /// Coefficient of determination of the log-linear fit.
    pub r_squared: f64,
}

/// Least-squares fit of log Δ_m against m; the slope exponentiated is the
/// empirical contraction factor.
pub fn estimate_kappa(deltas: &[f64]) -> Result<KappaFit, KappaError> {
    let pts: Vec<(f64, f64)> = deltas
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(i, d)| (i as f64, d.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(KappaError::TooFewSamples(pts.len()));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|(x, _)| x).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = pts.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    let kappa = slope.exp();
    if kappa >= 1.0 {
        return Err(KappaError::NotContracting(kappa));
    }
    Ok(KappaFit { kappa, r_squared })
}

/// Smallest m̄ ≥ log_κ((1−β)/(1+κ) · r/(σΔ)) − 1, floored at 1: the inner
/// iteration count that keeps the applied-input error inside the shift
/// tolerance (1−β)r.
pub fn min_iterations(kappa: f64, beta: f64, r: f64, sigma: f64, delta0: f64) -> usize {
    assert!(kappa > 0.0 && kappa < 1.0);
    assert!(beta > 0.0 && beta < 1.0);
    assert!(r > 0.0 && sigma > 0.0 && delta0 > 0.0);
    let arg = (1.0 - beta) / (1.0 + kappa) * r / (sigma * delta0);
    if arg >= 1.0 {
        return 1;
    }
    let bound = arg.ln() / kappa.ln() - 1.0;
    (bound.ceil() as i64).max(1) as usize
}
