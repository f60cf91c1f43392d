//! Problem data types, validation, and Riccati/LQR synthesis.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{max_sym_eig, min_sym_eig, symmetrize};

/// Cap on fixed-point Riccati iterations before declaring non-convergence.
const DARE_MAX_ITER: usize = 100_000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("(A,B) not stabilizable (Riccati fixed-point iteration did not converge)")]
    NotStabilizable,
}

/// Discrete-time linear system x⁺ = A x + B u.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, ModelError> {
        if a.nrows() != a.ncols() {
            return Err(ModelError::Dimension("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(ModelError::Dimension("B row count must match A".into()));
        }
        Ok(Self { a, b })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
}

/// Polyhedron { y | G y ≤ g } with strictly positive bounds, so the origin
/// is strictly interior.
#[derive(Debug, Clone)]
pub struct PolyhedralSet {
    /// Constraint normals, one row per inequality.
    pub normals: DMatrix<f64>,
    /// Right-hand side bounds (all > 0).
    pub bounds: DVector<f64>,
}

impl PolyhedralSet {
    pub fn new(normals: DMatrix<f64>, bounds: DVector<f64>) -> Result<Self, ModelError> {
        if normals.nrows() != bounds.len() {
            return Err(ModelError::Dimension(
                "constraint normals and bounds must have the same row count".into(),
            ));
        }
        Ok(Self { normals, bounds })
    }

    /// ∞-norm box { y | ‖y‖∞ ≤ half_width } as stacked ±I rows.
    pub fn inf_norm_box(dim: usize, half_width: f64) -> Self {
        let mut normals = DMatrix::zeros(2 * dim, dim);
        for i in 0..dim {
            normals[(i, i)] = 1.0;
            normals[(dim + i, i)] = -1.0;
        }
        Self {
            normals,
            bounds: DVector::from_element(2 * dim, half_width),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    /// Membership check with an absolute slack on each row.
    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        let vals = &self.normals * y;
        vals.iter()
            .zip(self.bounds.iter())
            .all(|(v, b)| *v <= *b + tol)
    }
}

/// The linear-quadratic MPC problem data: plant, constraint sets, weights
/// and horizon.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub system: LtiSystem,
    /// State set 𝕏.
    pub x_set: PolyhedralSet,
    /// Input set 𝕌.
    pub u_set: PolyhedralSet,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Terminal weight, normally the DARE solution.
    pub p: DMatrix<f64>,
    pub horizon: usize,
}

impl MpcProblem {
    pub fn n_x(&self) -> usize {
        self.system.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.system.n_u()
    }
}

/// Fixed point of the discrete algebraic Riccati equation together with the
/// infinite-horizon feedback gain, convention u = K x.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

/// Solve the DARE by the fixed-point iteration
/// P ← Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA starting at P = Q, stopping when the
/// relative change drops below `tol`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
) -> Result<RiccatiSolution, ModelError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(ModelError::Dimension(
            "A/B/Q dimensions inconsistent".into(),
        ));
    }
    if r.nrows() != b.ncols() || r.ncols() != b.ncols() {
        return Err(ModelError::Dimension("R must be n_u x n_u".into()));
    }
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let btp = b.transpose() * &p;
        let w = r + &btp * b;
        let chol = Cholesky::new(symmetrize(&w)).ok_or(ModelError::NotStabilizable)?;
        // K = -(R + BᵀPB)⁻¹ BᵀPA
        let k = -chol.solve(&(&btp * a));
        let p_next = symmetrize(&(q + a.transpose() * &p * (a + b * &k)));
        let change = (&p_next - &p).norm();
        p = p_next;
        if change <= tol * p.norm() {
            let btp = b.transpose() * &p;
            let chol =
                Cholesky::new(symmetrize(&(r + &btp * b))).ok_or(ModelError::NotStabilizable)?;
            let k = -chol.solve(&(&btp * a));
            if spectral_radius(&(a + b * &k), 1e-12) >= 1.0 {
                return Err(ModelError::NotStabilizable);
            }
            return Ok(RiccatiSolution { p, k });
        }
    }
    Err(ModelError::NotStabilizable)
}

/// Maximum eigenvalue modulus, via the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>, tol: f64) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let schur = m
        .clone()
        .try_schur(tol.max(1e-15), 1_000_000)
        .expect("Schur iteration did not converge");
    schur
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Smallest σ with BᵀQB ⪯ σR: the largest generalized eigenvalue of
/// (BᵀQB, R), computed from the R-whitened pencil.
pub fn compute_sigma(b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let m = symmetrize(&(b.transpose() * q * b));
    let chol = Cholesky::new(symmetrize(r)).expect("R must be positive definite");
    let l = chol.l();
    // L⁻¹ M L⁻ᵀ
    let y = l.solve_lower_triangular(&m).expect("singular R factor");
    let w = l
        .solve_lower_triangular(&y.transpose())
        .expect("singular R factor");
    max_sym_eig(&w)
}

/// Report every violated type invariant of the problem; empty means valid.
pub fn validate_problem(p: &MpcProblem) -> Vec<String> {
    let mut v = Vec::new();
    let (nx, nu) = (p.system.n_x(), p.system.n_u());
    if p.x_set.dim() != nx {
        v.push("state set dimension does not match the system".into());
    }
    if p.u_set.dim() != nu {
        v.push("input set dimension does not match the system".into());
    }
    if p.q.nrows() != nx || p.q.ncols() != nx {
        v.push("Q has wrong dimensions".into());
    } else if min_sym_eig(&p.q) <= 1e-12 {
        v.push("Q not positive definite".into());
    }
    if p.r.nrows() != nu || p.r.ncols() != nu {
        v.push("R has wrong dimensions".into());
    } else if min_sym_eig(&p.r) <= 1e-12 {
        v.push("R not positive definite".into());
    }
    if p.p.nrows() != nx || p.p.ncols() != nx {
        v.push("P has wrong dimensions".into());
    } else if min_sym_eig(&p.p) <= 1e-12 {
        v.push("P not positive definite".into());
    }
    if p.horizon == 0 {
        v.push("horizon must be positive".into());
    }
    if p.x_set.bounds.iter().any(|b| *b <= 0.0) {
        v.push("state bound not strictly positive".into());
    }
    if p.u_set.bounds.iter().any(|b| *b <= 0.0) {
        v.push("input bound not strictly positive".into());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dare_zero_a_collapses_to_q() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::identity(2, 2);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2);
        let sol = dare_solve(&a, &b, &q, &r, 1e-12).unwrap();
        assert!((&sol.p - &q).norm() < 1e-12);
        assert!(sol.k.norm() < 1e-12);
    }

    #[test]
    fn dare_scalar_golden_ratio() {
        // a=b=q=r=1: p = 1 + p - p²/(1+p) gives p² - p - 1 = 0, p = (1+√5)/2.
        let one = DMatrix::from_element(1, 1, 1.0);
        let sol = dare_solve(&one, &one, &one, &one, 1e-14).unwrap();
        let gold = (1.0 + 5.0_f64.sqrt()) / 2.0;
        assert!((sol.p[(0, 0)] - gold).abs() < 1e-10);
        assert!((sol.k[(0, 0)] + gold / (1.0 + gold)).abs() < 1e-10);
    }

    #[test]
    fn dare_residual_on_chain() {
        let (sys, _, _) = crate::chain::build_chain(&crate::chain::ChainParams::default_n(2));
        let q = DMatrix::identity(4, 4);
        let r = DMatrix::identity(2, 2);
        let sol = dare_solve(&sys.a, &sys.b, &q, &r, 1e-13).unwrap();
        let btp = sys.b.transpose() * &sol.p;
        let w = &r + &btp * &sys.b;
        let chol = Cholesky::new(w).unwrap();
        let rhs = &q + sys.a.transpose() * &sol.p * &sys.a
            - sys.a.transpose() * &sol.p * &sys.b * chol.solve(&(&btp * &sys.a));
        assert!((&sol.p - rhs).norm() <= 1e-10 * sol.p.norm());
        assert!(spectral_radius(&(&sys.a + &sys.b * &sol.k), 1e-12) < 1.0);
    }

    #[test]
    fn dare_rejects_unstabilizable() {
        // x⁺ = 2x, no input authority.
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(1, 1, 0.0);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        assert!(dare_solve(&a, &b, &q, &r, 1e-12).is_err());
    }

    #[test]
    fn dare_random_instances_satisfy_residual_and_stability() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut done = 0;
        while done < 200 {
            let nx = rng.gen_range(1..=8);
            let nu = rng.gen_range(1..=3);
            let a = DMatrix::from_fn(nx, nx, |_, _| rng.gen_range(-1.1..1.1));
            let b = DMatrix::from_fn(nx, nu, |_, _| rng.gen_range(-1.0..1.0));
            let q = DMatrix::identity(nx, nx);
            let r = DMatrix::identity(nu, nu);
            let Ok(sol) = dare_solve(&a, &b, &q, &r, 1e-12) else {
                continue;
            };
            let btp = b.transpose() * &sol.p;
            let gain_term =
                btp.transpose() * (&r + &btp * &b).clone().try_inverse().unwrap() * &btp;
            let resid = &sol.p - (&q + a.transpose() * (&sol.p - &gain_term) * &a);
            assert!(
                resid.norm() <= 1e-7 * (1.0 + sol.p.norm()),
                "residual {}",
                resid.norm()
            );
            let rho = spectral_radius(&(&a + &b * &sol.k), 1e-12);
            assert!(rho < 1.0, "rho = {rho}");
            done += 1;
        }
    }

    #[test]
    fn spectral_radius_matches_quadratic_roots_on_2x2() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let m = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-2.0..2.0f64));
            // Roots of λ² - tr λ + det.
            let tr = m.trace();
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let disc = tr * tr - 4.0 * det;
            let oracle = if disc >= 0.0 {
                let s = disc.sqrt();
                (0.5 * (tr + s)).abs().max((0.5 * (tr - s)).abs())
            } else {
                // Complex pair: modulus √det.
                det.abs().sqrt()
            };
            let rho = spectral_radius(&m, 1e-14);
            assert!((rho - oracle).abs() < 1e-10, "{rho} vs {oracle}");
        }
    }

    #[test]
    fn spectral_radius_examples() {
        let m = DMatrix::identity(2, 2) * 0.5;
        assert!((spectral_radius(&m, 1e-12) - 0.5).abs() < 1e-12);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(spectral_radius(&nil, 1e-12) < 1e-10);
        let tri = DMatrix::from_row_slice(2, 2, &[0.9, 0.5, 0.0, 0.8]);
        assert!((spectral_radius(&tri, 1e-12) - 0.9).abs() < 1e-10);
    }

    #[test]
    fn sigma_identity_and_scaling() {
        let i2 = DMatrix::identity(2, 2);
        assert!((compute_sigma(&i2, &i2, &i2) - 1.0).abs() < 1e-12);
        let r2 = &i2 * 2.0;
        assert!((compute_sigma(&i2, &i2, &r2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sigma_matches_eigen_oracle() {
        let b = DMatrix::from_row_slice(3, 2, &[0.3, -1.1, 0.7, 0.2, -0.4, 0.9]);
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(2, 2);
        let sigma = compute_sigma(&b, &q, &r);
        let oracle = max_sym_eig(&(b.transpose() * &b));
        assert!((sigma - oracle).abs() < 1e-10);
        // σR - BᵀQB is PSD; (σ-ε)R - BᵀQB is not.
        let m = b.transpose() * &q * &b;
        assert!(min_sym_eig(&(&r * sigma - &m)) >= -1e-10);
        let eps = 1e-6 * sigma;
        assert!(min_sym_eig(&(&r * (sigma - eps) - &m)) < 0.0);
    }

    #[test]
    fn validation_reports_violations() {
        let (sys, x_set, u_set) =
            crate::chain::build_chain(&crate::chain::ChainParams::default_n(2));
        let nx = sys.n_x();
        let nu = sys.n_u();
        let good = MpcProblem {
            system: sys.clone(),
            x_set: x_set.clone(),
            u_set: u_set.clone(),
            q: DMatrix::identity(nx, nx),
            r: DMatrix::identity(nu, nu),
            p: DMatrix::identity(nx, nx),
            horizon: 5,
        };
        assert!(validate_problem(&good).is_empty());

        let mut zero_bound = good.clone();
        zero_bound.x_set.bounds[0] = 0.0;
        let v = validate_problem(&zero_bound);
        assert!(v.iter().any(|s| s.contains("state bound")));

        let mut bad_q = good.clone();
        bad_q.q[(0, 0)] = -1.0;
        let v = validate_problem(&bad_q);
        assert!(v.iter().any(|s| s.contains("Q not positive definite")));
    }
}
