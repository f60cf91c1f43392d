//! β-contractive ellipsoid synthesis, separable margin tightening, the
//! terminal region, and certificate shifting.
//!
//! The offline product is an ellipsoid E(Z) = { x : xᵀZ⁻¹x ≤ 1 } and a
//! gain K such that the closed loop contracts E(Z) by a factor β per step
//! while K keeps every constraint satisfiable inside (1+α)⁻¹-scaled
//! bounds. From Z the per-stage margins ĉ_k, d̂_k follow in closed form,
//! and admissible certificates can be shifted forward in time while
//! absorbing bounded perturbations of the measured state.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{min_sym_eig, symmetrize};
use crate::model::{spectral_radius, LtiSystem, PolyhedralSet};

/// Membership tolerance on quadratic forms.
const MEMBER_TOL: f64 = 1e-9;
/// Truncation threshold for the Lyapunov series.
const LYAP_TERM_TOL: f64 = 1e-14;
const LYAP_MAX_TERMS: usize = 100_000;

#[derive(Debug, Error)]
pub enum ContractionError {
    #[error("closed loop is not contractive: spectral radius {0} >= 1")]
    NotContractive(f64),
    #[error("requested beta {requested} outside ({rho}, 1)")]
    InvalidBeta { requested: f64, rho: f64 },
    #[error("inner radius too large; largest admissible radius is {suggested}")]
    RadiusTooLarge { suggested: f64 },
    #[error("margin became non-positive at stage {stage}, row {row}")]
    EmptyMargin { stage: usize, row: usize },
    #[error("Lyapunov series did not converge")]
    NoConvergence,
}

/// Offline synthesis output: everything the online controller and the
/// feasibility argument need.
#[derive(Debug, Clone)]
pub struct ContractionDesign {
    /// Feedback gain, convention u = K x.
    pub k: DMatrix<f64>,
    /// Contraction factor in (ρ(A+BK), 1).
    pub beta: f64,
    /// Ellipsoid shape (symmetric PD).
    pub z: DMatrix<f64>,
    /// Inner radius: r²·I ⪯ Z.
    pub r: f64,
    /// Terminal scaling, ≥ betaᴺ.
    pub alpha: f64,
    /// Smallest σ with BᵀQB ⪯ σR.
    pub sigma: f64,
    /// Empirically fitted contraction factor of the inner iteration.
    pub kappa_hat: Option<f64>,
}

/// Per-stage constraint bounds ĉ_0..ĉ_N (states) and d̂_0..d̂_{N−1}
/// (inputs), elementwise non-increasing in the stage index.
#[derive(Debug, Clone)]
pub struct TightenedMargins {
    pub c_hat: Vec<DVector<f64>>,
    pub d_hat: Vec<DVector<f64>>,
}

impl TightenedMargins {
    pub fn horizon(&self) -> usize {
        self.d_hat.len()
    }
}

/// Existence witness: a dynamically consistent trajectory whose stages sit
/// inside the tightened bounds and whose endpoint reaches the terminal set.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub y: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
}

/// Pick the contraction factor: a requested value is validated against
/// (ρ(A+BK), 1); otherwise the midpoint (ρ+1)/2 is used.
pub fn select_beta(
    system: &LtiSystem,
    k: &DMatrix<f64>,
    requested: Option<f64>,
) -> Result<f64, ContractionError> {
    let rho = spectral_radius(&(&system.a + &system.b * k), 1e-12);
    if rho >= 1.0 {
        return Err(ContractionError::NotContractive(rho));
    }
    match requested {
        Some(b) if b > rho && b < 1.0 => Ok(b),
        Some(b) => Err(ContractionError::InvalidBeta { requested: b, rho }),
        None => Ok((rho + 1.0) / 2.0),
    }
}

/// Solve S X Sᵀ − X = −I for ρ(S) < 1 by the convergent series
/// X = Σ_j Sʲ (Sᵀ)ʲ, truncated when the term norm drops below 1e−14.
fn dlyap_identity(s: &DMatrix<f64>) -> Result<DMatrix<f64>, ContractionError> {
    let n = s.nrows();
    let mut x = DMatrix::identity(n, n);
    let mut pow = s.clone();
    for _ in 0..LYAP_MAX_TERMS {
        let term = &pow * pow.transpose();
        x += &term;
        if term.norm() < LYAP_TERM_TOL {
            return Ok(symmetrize(&x));
        }
        pow = s * &pow;
    }
    Err(ContractionError::NoConvergence)
}

/// Largest admissible scaling of the unit-Lyapunov shape under the
/// row-wise support conditions C_i Z C_iᵀ ≤ (1+α)⁻² c_i² and the analogous
/// input rows through K.
fn gamma_max(
    z_tilde: &DMatrix<f64>,
    k: &DMatrix<f64>,
    alpha: f64,
    x_set: &PolyhedralSet,
    u_set: &PolyhedralSet,
) -> f64 {
    let scale = (1.0 + alpha).powi(-2);
    let mut best = f64::INFINITY;
    for i in 0..x_set.num_rows() {
        let ci = x_set.normals.row(i).transpose();
        let qf = ci.dot(&(z_tilde * &ci));
        if qf > 0.0 {
            best = best.min(scale * x_set.bounds[i].powi(2) / qf);
        }
    }
    let kz = k * z_tilde * k.transpose();
    for i in 0..u_set.num_rows() {
        let di = u_set.normals.row(i).transpose();
        let qf = di.dot(&(&kz * &di));
        if qf > 0.0 {
            best = best.min(scale * u_set.bounds[i].powi(2) / qf);
        }
    }
    best
}

/// Synthesize the ellipsoid shape: Lyapunov solve for S = β⁻¹(A+BK), then
/// scale so λ_min(Z) = r², verifying the scaled shape still fits the
/// row-wise bounds.
pub fn synth_ellipsoid(
    system: &LtiSystem,
    k: &DMatrix<f64>,
    beta: f64,
    r: f64,
    alpha: f64,
    x_set: &PolyhedralSet,
    u_set: &PolyhedralSet,
) -> Result<DMatrix<f64>, ContractionError> {
    assert!(r > 0.0 && beta > 0.0 && beta < 1.0);
    let a_cl = &system.a + &system.b * k;
    let rho = spectral_radius(&a_cl, 1e-12);
    if rho >= 1.0 {
        return Err(ContractionError::NotContractive(rho));
    }
    if rho >= beta {
        return Err(ContractionError::InvalidBeta {
            requested: beta,
            rho,
        });
    }
    let s = &a_cl / beta;
    let z_tilde = dlyap_identity(&s)?;
    let lam_min = min_sym_eig(&z_tilde);
    let gamma = r * r / lam_min;
    let g_max = gamma_max(&z_tilde, k, alpha, x_set, u_set);
    if gamma > g_max {
        return Err(ContractionError::RadiusTooLarge {
            suggested: (g_max * lam_min).sqrt(),
        });
    }
    Ok(&z_tilde * gamma)
}

/// The support-function crossing radius computed directly: synthesis
/// succeeds exactly for r at or below this value. One Lyapunov solve,
/// preferable to [`max_inner_radius`] for large systems.
pub fn max_inner_radius_direct(
    system: &LtiSystem,
    k: &DMatrix<f64>,
    beta: f64,
    alpha: f64,
    x_set: &PolyhedralSet,
    u_set: &PolyhedralSet,
) -> Result<f64, ContractionError> {
    let a_cl = &system.a + &system.b * k;
    let rho = spectral_radius(&a_cl, 1e-12);
    if rho >= 1.0 {
        return Err(ContractionError::NotContractive(rho));
    }
    if rho >= beta {
        return Err(ContractionError::InvalidBeta {
            requested: beta,
            rho,
        });
    }
    let z_tilde = dlyap_identity(&(&a_cl / beta))?;
    Ok((gamma_max(&z_tilde, k, alpha, x_set, u_set) * min_sym_eig(&z_tilde)).sqrt())
}

/// Largest inner radius for which synth_ellipsoid succeeds, found by
/// bisection to relative tolerance `tol`.
pub fn max_inner_radius(
    system: &LtiSystem,
    k: &DMatrix<f64>,
    beta: f64,
    alpha: f64,
    x_set: &PolyhedralSet,
    u_set: &PolyhedralSet,
    tol: f64,
) -> Result<f64, ContractionError> {
    let ok = |r: f64| synth_ellipsoid(system, k, beta, r, alpha, x_set, u_set).is_ok();
    // Validate contraction once so NotContractive/InvalidBeta propagate.
    synth_ellipsoid(system, k, beta, 1e-8, alpha, x_set, u_set)?;
    let mut lo = 1e-8;
    let mut hi = 1.0;
    while ok(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Ok(lo);
        }
    }
    while (hi - lo) > tol * hi {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Per-stage bounds ĉ_k[i] = c_i − (1−β^k)√(C_i Z C_iᵀ) and
/// d̂_k[i] = d_i − (1−β^k)√(D_i K Z Kᵀ D_iᵀ), for k = 0..N (states) and
/// k = 0..N−1 (inputs).
pub fn tighten_margins(
    z: &DMatrix<f64>,
    k: &DMatrix<f64>,
    beta: f64,
    horizon: usize,
    x_set: &PolyhedralSet,
    u_set: &PolyhedralSet,
) -> Result<TightenedMargins, ContractionError> {
    let kz = k * z * k.transpose();
    let x_support: Vec<f64> = (0..x_set.num_rows())
        .map(|i| {
            let ci = x_set.normals.row(i).transpose();
            ci.dot(&(z * &ci)).max(0.0).sqrt()
        })
        .collect();
    let u_support: Vec<f64> = (0..u_set.num_rows())
        .map(|i| {
            let di = u_set.normals.row(i).transpose();
            di.dot(&(&kz * &di)).max(0.0).sqrt()
        })
        .collect();
    let mut c_hat = Vec::with_capacity(horizon + 1);
    let mut d_hat = Vec::with_capacity(horizon);
    for stage in 0..=horizon {
        let f = 1.0 - beta.powi(stage as i32);
        let ck = DVector::from_fn(x_set.num_rows(), |i, _| x_set.bounds[i] - f * x_support[i]);
        if let Some(row) = ck.iter().position(|v| *v <= 0.0) {
            return Err(ContractionError::EmptyMargin { stage, row });
        }
        c_hat.push(ck);
        if stage < horizon {
            let dk = DVector::from_fn(u_set.num_rows(), |i, _| u_set.bounds[i] - f * u_support[i]);
            if let Some(row) = dk.iter().position(|v| *v <= 0.0) {
                return Err(ContractionError::EmptyMargin { stage, row });
            }
            d_hat.push(dk);
        }
    }
    Ok(TightenedMargins { c_hat, d_hat })
}

/// Membership in the terminal region α·E(Z): xᵀZ⁻¹x ≤ α².
pub fn in_terminal(x: &DVector<f64>, z: &DMatrix<f64>, alpha: f64) -> bool {
    let chol = Cholesky::new(symmetrize(z)).expect("Z must be positive definite");
    x.dot(&chol.solve(x)) <= alpha * alpha + MEMBER_TOL
}

/// Full admissibility check of a certificate for the pair (x, u):
/// anchoring, dynamics, stagewise margins, and terminal membership.
#[allow(clippy::too_many_arguments)]
pub fn check_certificate(
    cert: &Certificate,
    margins: &TightenedMargins,
    z: &DMatrix<f64>,
    alpha: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    system: &LtiSystem,
    x_set: &PolyhedralSet,
    u_set: &PolyhedralSet,
) -> bool {
    let n = margins.horizon();
    if cert.y.len() != n + 1 || cert.w.len() != n {
        return false;
    }
    if (&cert.y[0] - x).norm() > MEMBER_TOL || (&cert.w[0] - u).norm() > MEMBER_TOL {
        return false;
    }
    for k in 0..n {
        let resid = &cert.y[k + 1] - (&system.a * &cert.y[k] + &system.b * &cert.w[k]);
        if resid.norm() > MEMBER_TOL {
            return false;
        }
        let cx = &x_set.normals * &cert.y[k];
        if cx
            .iter()
            .zip(margins.c_hat[k].iter())
            .any(|(v, b)| *v > *b + MEMBER_TOL)
        {
            return false;
        }
        let du = &u_set.normals * &cert.w[k];
        if du
            .iter()
            .zip(margins.d_hat[k].iter())
            .any(|(v, b)| *v > *b + MEMBER_TOL)
        {
            return false;
        }
    }
    in_terminal(&cert.y[n], z, alpha)
}

/// Shift a certificate one step forward around the measured successor
/// state: the tail tracks the old trajectory under the feedback K and the
/// plan is extended by the terminal recursion y_{N+1} = (A+BK) y_N,
/// w_N = K y_N.
pub fn shift_certificate(
    cert: &Certificate,
    x_plus: &DVector<f64>,
    k: &DMatrix<f64>,
    system: &LtiSystem,
) -> Certificate {
    let n = cert.w.len();
    let a_cl = &system.a + &system.b * k;
    // Extended tail of the old plan.
    let y_ext = &a_cl * &cert.y[n];
    let w_ext = k * &cert.y[n];
    let mut y = Vec::with_capacity(n + 1);
    let mut w = Vec::with_capacity(n);
    y.push(x_plus.clone());
    for kk in 0..n {
        let old_next = &cert.y[kk + 1];
        let diff = &y[kk] - old_next;
        let w_old = if kk + 1 < n { &cert.w[kk + 1] } else { &w_ext };
        w.push(w_old + k * &diff);
        let y_old2 = if kk + 2 <= n { &cert.y[kk + 2] } else { &y_ext };
        y.push(y_old2 + &a_cl * diff);
    }
    Certificate { y, w }
}

/// Certificate for any x ∈ E(Z): the pure feedback rollout u = K y. Its
/// admissibility follows from the contraction and row-wise conditions.
pub fn feedback_certificate(
    x: &DVector<f64>,
    k: &DMatrix<f64>,
    system: &LtiSystem,
    horizon: usize,
) -> Certificate {
    let a_cl = &system.a + &system.b * k;
    let mut y = vec![x.clone()];
    let mut w = Vec::with_capacity(horizon);
    for kk in 0..horizon {
        w.push(k * &y[kk]);
        let next = &a_cl * &y[kk];
        y.push(next);
    }
    Certificate { y, w }
}

/// Invariant suite for a synthesized design; returns human-readable
/// violations (empty means the design is sound).
pub fn verify_design(
    design: &ContractionDesign,
    system: &LtiSystem,
    x_set: &PolyhedralSet,
    u_set: &PolyhedralSet,
    horizon: usize,
) -> Vec<String> {
    let mut v = Vec::new();
    let a_cl = &system.a + &system.b * &design.k;
    let lhs = &design.z * design.beta.powi(2) - &a_cl * &design.z * a_cl.transpose();
    let slack = min_sym_eig(&lhs);
    if slack < -1e-9 {
        v.push(format!("contraction inequality violated: slack {slack}"));
    }
    let inner = min_sym_eig(
        &(&design.z - DMatrix::identity(design.z.nrows(), design.z.ncols()) * design.r * design.r),
    );
    if inner < -1e-9 {
        v.push(format!("inner radius violated: slack {inner}"));
    }
    let scale = (1.0 + design.alpha).powi(-2);
    for i in 0..x_set.num_rows() {
        let ci = x_set.normals.row(i).transpose();
        let qf = ci.dot(&(&design.z * &ci));
        if qf > scale * x_set.bounds[i].powi(2) + 1e-9 {
            v.push(format!("state support condition violated on row {i}"));
        }
    }
    let kz = &design.k * &design.z * design.k.transpose();
    for i in 0..u_set.num_rows() {
        let di = u_set.normals.row(i).transpose();
        let qf = di.dot(&(&kz * &di));
        if qf > scale * u_set.bounds[i].powi(2) + 1e-9 {
            v.push(format!("input support condition violated on row {i}"));
        }
    }
    if design.alpha < design.beta.powi(horizon as i32) - 1e-12 {
        v.push("terminal scaling below beta^N".into());
    }
    v
}
