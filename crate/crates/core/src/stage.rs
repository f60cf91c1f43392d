//! Decoupled stage problems and the consensus solve.
//!
//! One inner iteration splits into N+1 independent stage problems (an
//! input-only initial problem, N−1 coupled state-input problems, and a
//! closed-form terminal problem) followed by an equality-constrained
//! tracking problem over the dynamics, solved by a Riccati sweep. The
//! stage problems carry all inequality constraints; the consensus step
//! restores dynamic feasibility and yields the co-state increment δ.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::contraction::TightenedMargins;
use crate::model::{LtiSystem, PolyhedralSet};
use crate::qp::{solve_dense_qp_warm, DenseQp, QpError, QpShape};

/// Inequality rows attached to one stage problem.
///
/// `input_rows` is (D, d̂_k) on the stage input; `state_rows` is
/// (C, ĉ_{k+1}) on the successor state and is absent in input-only mode.
pub struct StageBounds<'a> {
    pub input_rows: (&'a DMatrix<f64>, DVector<f64>),
    pub state_rows: Option<(&'a DMatrix<f64>, DVector<f64>)>,
}

/// Linear term of the initial problem.
pub fn initial_lin(
    lambda0: &DVector<f64>,
    v0: &DVector<f64>,
    system: &LtiSystem,
    r_w: &DMatrix<f64>,
) -> DVector<f64> {
    -system.b.transpose() * lambda0 - r_w * v0 * 2.0
}

/// Linear term of a middle problem, stacked (x part, u part).
pub fn stage_lin(
    lambda_km1: &DVector<f64>,
    lambda_k: &DVector<f64>,
    z_k: &DVector<f64>,
    v_k: &DVector<f64>,
    system: &LtiSystem,
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
) -> DVector<f64> {
    let (nx, nu) = (system.n_x(), system.n_u());
    let gx = lambda_km1 - system.a.transpose() * lambda_k - q_w * z_k * 2.0;
    let gu = -system.b.transpose() * lambda_k - r_w * v_k * 2.0;
    let mut g = DVector::zeros(nx + nu);
    g.rows_mut(0, nx).copy_from(&gx);
    g.rows_mut(nx, nu).copy_from(&gu);
    g
}

/// Initial problem: min ‖u‖²_R − λ₀ᵀBu + ‖u−v₀‖²_R over u ∈ stage bounds,
/// with the successor-state rows evaluated at A x̂ + B u.
pub fn build_initial_qp(
    lambda0: &DVector<f64>,
    v0: &DVector<f64>,
    x_hat: &DVector<f64>,
    system: &LtiSystem,
    r_w: &DMatrix<f64>,
    bounds: &StageBounds,
) -> DenseQp {
    let h = r_w * 4.0;
    let g = initial_lin(lambda0, v0, system, r_w);
    let (d, d_hat) = &bounds.input_rows;
    let (mut a, mut b) = ((*d).clone(), d_hat.clone());
    if let Some((c, c_hat)) = &bounds.state_rows {
        // C(Ax̂ + Bu) ≤ ĉ  ⇔  (CB) u ≤ ĉ − CA x̂.
        let cb = *c * &system.b;
        let rhs = c_hat - *c * (&system.a * x_hat);
        a = stack_rows(&a, &cb);
        b = stack_vec(&b, &rhs);
    }
    DenseQp { h, g, a, b }
}

/// Middle problem k: decision (x_k, u_k), cost
/// ‖x‖²_Q + ‖u‖²_R − λ_kᵀBu + (λ_{k−1} − Aᵀλ_k)ᵀx + ‖x−z_k‖²_Q + ‖u−v_k‖²_R.
#[allow(clippy::too_many_arguments)]
pub fn build_stage_qp(
    lambda_km1: &DVector<f64>,
    lambda_k: &DVector<f64>,
    z_k: &DVector<f64>,
    v_k: &DVector<f64>,
    system: &LtiSystem,
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    bounds: &StageBounds,
) -> DenseQp {
    let (nx, nu) = (system.n_x(), system.n_u());
    let mut h = DMatrix::zeros(nx + nu, nx + nu);
    h.view_mut((0, 0), (nx, nx)).copy_from(&(q_w * 4.0));
    h.view_mut((nx, nx), (nu, nu)).copy_from(&(r_w * 4.0));
    let g = stage_lin(lambda_km1, lambda_k, z_k, v_k, system, q_w, r_w);

    let (d, d_hat) = &bounds.input_rows;
    let mut a = DMatrix::zeros(d.nrows(), nx + nu);
    a.view_mut((0, nx), (d.nrows(), nu)).copy_from(*d);
    let mut b = d_hat.clone();
    if let Some((c, c_hat)) = &bounds.state_rows {
        // C(Ax + Bu) ≤ ĉ as a joint row block [CA  CB].
        let mut blk = DMatrix::zeros(c.nrows(), nx + nu);
        blk.view_mut((0, 0), (c.nrows(), nx))
            .copy_from(&(*c * &system.a));
        blk.view_mut((0, nx), (c.nrows(), nu))
            .copy_from(&(*c * &system.b));
        a = stack_rows(&a, &blk);
        b = stack_vec(&b, c_hat);
    }
    DenseQp { h, g, a, b }
}

/// Terminal problem: min ‖x‖²_P + λ_{N−1}ᵀx + ‖x − z_N‖²_P, closed form
/// x_N = z_N/2 − P⁻¹λ_{N−1}/4.
pub fn solve_stage_terminal(
    lambda_nm1: &DVector<f64>,
    z_n: &DVector<f64>,
    p_chol: &Cholesky<f64, Dyn>,
) -> DVector<f64> {
    z_n * 0.5 - p_chol.solve(lambda_nm1) * 0.25
}

/// Solve the initial problem; returns u₀ and the active set for warm starts.
pub fn solve_stage_initial(
    qp: &DenseQp,
    tol: f64,
    warm: &[usize],
) -> Result<(DVector<f64>, Vec<usize>), QpError> {
    let sol = solve_dense_qp_warm(qp, tol, warm)?;
    Ok((sol.y, sol.active))
}

/// Solve a middle problem; splits the joint solution back into (x_k, u_k).
#[allow(clippy::type_complexity)]
pub fn solve_stage_k(
    qp: &DenseQp,
    nx: usize,
    tol: f64,
    warm: &[usize],
) -> Result<(DVector<f64>, DVector<f64>, Vec<usize>), QpError> {
    let sol = solve_dense_qp_warm(qp, tol, warm)?;
    let nu = sol.y.len() - nx;
    Ok((
        sol.y.rows(0, nx).into_owned(),
        sol.y.rows(nx, nu).into_owned(),
        sol.active,
    ))
}

/// Shared QP structure for all stage solves of one problem: the Hessians
/// and constraint matrices never change across inner iterations or control
/// steps, only the linear terms and (for the initial stage) the rhs do.
pub struct StageShapes {
    /// Initial problem over u₀.
    pub init: QpShape,
    /// Middle problems over (x_k, u_k); identical structure for all k.
    pub mid: QpShape,
    /// Middle-problem rhs for k = 1..N−1 (index k−1).
    pub b_mid: Vec<DVector<f64>>,
    /// Initial-stage input bound d̂_0.
    d0: DVector<f64>,
    /// (C·A, ĉ_1) for the initial successor-state rows; absent in
    /// input-only mode.
    state_cut: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl StageShapes {
    /// `margins = None` selects input-only mode.
    pub fn new(
        system: &LtiSystem,
        q_w: &DMatrix<f64>,
        r_w: &DMatrix<f64>,
        x_set: &PolyhedralSet,
        u_set: &PolyhedralSet,
        margins: Option<&TightenedMargins>,
        horizon: usize,
    ) -> Self {
        assert!(horizon >= 1);
        let (nx, nu) = (system.n_x(), system.n_u());
        let zeros_x = DVector::zeros(nx);
        let zeros_u = DVector::zeros(nu);
        let bounds_at = |k: usize| -> StageBounds<'_> {
            match margins {
                None => StageBounds {
                    input_rows: (&u_set.normals, u_set.bounds.clone()),
                    state_rows: None,
                },
                Some(m) => StageBounds {
                    input_rows: (&u_set.normals, m.d_hat[k].clone()),
                    state_rows: Some((&x_set.normals, m.c_hat[k + 1].clone())),
                },
            }
        };
        let init_qp = build_initial_qp(&zeros_x, &zeros_u, &zeros_x, system, r_w, &bounds_at(0));
        // Structure of the middle problems does not depend on k; use k = 1
        // (or 0 when N = 1, which is never solved but keeps shapes valid).
        let mid_qp = build_stage_qp(
            &zeros_x,
            &zeros_x,
            &zeros_x,
            &zeros_u,
            system,
            q_w,
            r_w,
            &bounds_at(if horizon > 1 { 1 } else { 0 }),
        );
        let b_mid = (1..horizon)
            .map(|k| match margins {
                None => u_set.bounds.clone(),
                Some(m) => stack_vec(&m.d_hat[k], &m.c_hat[k + 1]),
            })
            .collect();
        let d0 = match margins {
            None => u_set.bounds.clone(),
            Some(m) => m.d_hat[0].clone(),
        };
        let state_cut = margins.map(|m| (&x_set.normals * &system.a, m.c_hat[1].clone()));
        Self {
            init: QpShape::new(init_qp.h, init_qp.a).expect("R PD"),
            mid: QpShape::new(mid_qp.h, mid_qp.a).expect("Q, R PD"),
            b_mid,
            d0,
            state_cut,
        }
    }

    /// Initial-stage rhs for the measured state: [d̂_0; ĉ_1 − C A x̂].
    pub fn init_rhs(&self, x_hat: &DVector<f64>) -> DVector<f64> {
        match &self.state_cut {
            None => self.d0.clone(),
            Some((ca, c1)) => stack_vec(&self.d0, &(c1 - ca * x_hat)),
        }
    }
}

/// Precomputed Riccati data for the consensus problem. Depends only on
/// (A, B, Q, R, P, N), so it is built once per problem and reused for
/// every inner iteration.
pub struct ConsensusCache {
    /// Value Hessians P_k, k = 0..N (P_N is the terminal weight).
    p: Vec<DMatrix<f64>>,
    /// Feedback gains K_k, k = 0..N−1.
    k: Vec<DMatrix<f64>>,
    /// Cholesky factors of W_k = R + BᵀP_{k+1}B.
    w_chol: Vec<Cholesky<f64, Dyn>>,
    /// Closed-loop maps A + B K_k.
    a_cl: Vec<DMatrix<f64>>,
    horizon: usize,
}

impl ConsensusCache {
    pub fn new(
        system: &LtiSystem,
        q_w: &DMatrix<f64>,
        r_w: &DMatrix<f64>,
        p_w: &DMatrix<f64>,
        horizon: usize,
    ) -> Self {
        assert!(horizon >= 1);
        let n = horizon;
        let mut p = vec![DMatrix::zeros(0, 0); n + 1];
        let mut k = vec![DMatrix::zeros(0, 0); n];
        let mut a_cl = vec![DMatrix::zeros(0, 0); n];
        let mut w_chol = Vec::with_capacity(n);
        p[n] = p_w.clone();
        // Build factors backward; store in forward order afterwards.
        let mut chols: Vec<Option<Cholesky<f64, Dyn>>> = (0..n).map(|_| None).collect();
        for kk in (0..n).rev() {
            let btp = system.b.transpose() * &p[kk + 1];
            let w = r_w + &btp * &system.b;
            let chol = Cholesky::new(crate::linalg::symmetrize(&w))
                .expect("W_k positive definite for PD R and PSD P");
            let gain = -chol.solve(&(&btp * &system.a));
            let acl = &system.a + &system.b * &gain;
            p[kk] = crate::linalg::symmetrize(&(q_w + system.a.transpose() * &p[kk + 1] * &acl));
            k[kk] = gain;
            a_cl[kk] = acl;
            chols[kk] = Some(chol);
        }
        for c in chols {
            w_chol.push(c.unwrap());
        }
        Self {
            p,
            k,
            w_chol,
            a_cl,
            horizon,
        }
    }
}

/// Output of one consensus solve: dynamically exact iterate and the
/// dynamics multipliers.
#[derive(Debug, Clone)]
pub struct ConsensusSolution {
    /// z⁺_0 … z⁺_N (z⁺_0 = x̂).
    pub z_plus: Vec<DVector<f64>>,
    /// v⁺_0 … v⁺_{N−1}.
    pub v_plus: Vec<DVector<f64>>,
    /// Dynamics multipliers δ_0 … δ_{N−1}, scaled so λ ← λ + δ converges
    /// to the co-state of the coupled problem.
    pub delta: Vec<DVector<f64>>,
}

/// Track the targets a_k = 2x_k − z_k (k = 1..N) and b_k = 2u_k − v_k
/// (k = 0..N−1) over the dynamics from z⁺_0 = x̂:
///
///   min Σ ‖z⁺_k − a_k‖²_Q + ‖v⁺_k − b_k‖²_R + ‖z⁺_N − a_N‖²_P
///   s.t. z⁺_{k+1} = A z⁺_k + B v⁺_k.
///
/// Backward sweep over the linear terms q_k, then forward rollout;
/// δ_k = −2(P_{k+1} z⁺_{k+1} + q_{k+1}) from the value-function gradient.
#[allow(clippy::too_many_arguments)]
pub fn solve_consensus(
    cache: &ConsensusCache,
    system: &LtiSystem,
    q_w: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    x_stage: &[DVector<f64>],
    u_stage: &[DVector<f64>],
    z: &[DVector<f64>],
    v: &[DVector<f64>],
    x_hat: &DVector<f64>,
) -> ConsensusSolution {
    let n = cache.horizon;
    assert_eq!(x_stage.len(), n, "need x_1..x_N");
    assert_eq!(u_stage.len(), n, "need u_0..u_{{N-1}}");
    assert_eq!(z.len(), n + 1);
    assert_eq!(v.len(), n);

    // Targets; a[k] holds a_{k+1}.
    let a: Vec<DVector<f64>> = (0..n).map(|k| &x_stage[k] * 2.0 - &z[k + 1]).collect();
    let b: Vec<DVector<f64>> = (0..n).map(|k| &u_stage[k] * 2.0 - &v[k]).collect();

    // Backward sweep: q[k] is the linear value term at time k, k = 1..N.
    let mut q_lin = vec![DVector::zeros(0); n + 1];
    let mut s = vec![DVector::zeros(0); n];
    q_lin[n] = -(&cache.p[n] * &a[n - 1]);
    for k in (0..n).rev() {
        s[k] = cache.w_chol[k].solve(&(r_w * &b[k] - system.b.transpose() * &q_lin[k + 1]));
        if k > 0 {
            q_lin[k] = -(q_w * &a[k - 1])
                + cache.k[k].transpose() * (r_w * (&s[k] - &b[k]))
                + cache.a_cl[k].transpose()
                    * (&cache.p[k + 1] * (&system.b * &s[k]) + &q_lin[k + 1]);
        }
    }

    // Forward rollout and multipliers.
    let mut z_plus = Vec::with_capacity(n + 1);
    let mut v_plus = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    z_plus.push(x_hat.clone());
    for k in 0..n {
        let nu_k = &cache.k[k] * &z_plus[k] + &s[k];
        let next = &system.a * &z_plus[k] + &system.b * &nu_k;
        delta.push(-(&cache.p[k + 1] * &next + &q_lin[k + 1]) * 2.0);
        z_plus.push(next);
        v_plus.push(nu_k);
    }
    ConsensusSolution {
        z_plus,
        v_plus,
        delta,
    }
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(
        top.nrows() + bottom.nrows(),
        top.ncols().max(bottom.ncols()),
    );
    out.view_mut((0, 0), (top.nrows(), top.ncols()))
        .copy_from(top);
    out.view_mut((top.nrows(), 0), (bottom.nrows(), bottom.ncols()))
        .copy_from(bottom);
    out
}

fn stack_vec(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(top);
    out.rows_mut(top.len(), bottom.len()).copy_from(bottom);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::solve_dense_qp;

    fn scalar_system(a: f64, b: f64) -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
        )
        .unwrap()
    }

    fn no_input_bound(nu: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, nu), DVector::zeros(0))
    }

    #[test]
    fn initial_stage_hand_examples() {
        let sys = scalar_system(1.0, 4.0); // λ₀ᵀB = 4 with λ₀ = 1
        let r_w = DMatrix::identity(1, 1);
        let (d0, dv0) = no_input_bound(1);
        let bounds = StageBounds {
            input_rows: (&d0, dv0),
            state_rows: None,
        };
        let qp = build_initial_qp(
            &DVector::from_vec(vec![1.0]),
            &DVector::zeros(1),
            &DVector::zeros(1),
            &sys,
            &r_w,
            &bounds,
        );
        // min 2u² − 4u → u = 1.
        let (u, _) = solve_stage_initial(&qp, 1e-10, &[]).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12);

        let d = DMatrix::from_element(1, 1, 1.0);
        let bounds = StageBounds {
            input_rows: (&d, DVector::from_vec(vec![0.5])),
            state_rows: None,
        };
        let qp = build_initial_qp(
            &DVector::from_vec(vec![1.0]),
            &DVector::zeros(1),
            &DVector::zeros(1),
            &sys,
            &r_w,
            &bounds,
        );
        let (u, active) = solve_stage_initial(&qp, 1e-10, &[]).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-12);
        assert_eq!(active, vec![0]);
    }

    #[test]
    fn middle_stage_hand_stationarity() {
        // λ_{k−1} − Aᵀλ_k = −4q e₁ with everything else zero gives x = e₁.
        let sys = LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let q_w = DMatrix::identity(2, 2) * 3.0;
        let r_w = DMatrix::identity(2, 2);
        let lambda_km1 = DVector::from_vec(vec![-12.0, 0.0]);
        let (d0, dv0) = no_input_bound(2);
        let bounds = StageBounds {
            input_rows: (&d0, dv0),
            state_rows: None,
        };
        let qp = build_stage_qp(
            &lambda_km1,
            &DVector::zeros(2),
            &DVector::zeros(2),
            &DVector::zeros(2),
            &sys,
            &q_w,
            &r_w,
            &bounds,
        );
        let (x, u, _) = solve_stage_k(&qp, 2, 1e-10, &[]).unwrap();
        assert!((x - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-12);
        assert!(u.norm() < 1e-12);
    }

    #[test]
    fn middle_stage_constrained_matches_kernel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sys = LtiSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.1, 0.95]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        )
        .unwrap();
        let q_w = DMatrix::identity(2, 2);
        let r_w = DMatrix::identity(1, 1);
        let d = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let c = crate::model::PolyhedralSet::inf_norm_box(2, 1.0).normals;
        for _ in 0..20 {
            let rnd = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
                DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64))
            };
            let bounds = StageBounds {
                input_rows: (&d, DVector::from_element(2, 0.3)),
                state_rows: Some((&c, DVector::from_element(4, 0.8))),
            };
            let qp = build_stage_qp(
                &rnd(&mut rng, 2),
                &rnd(&mut rng, 2),
                &rnd(&mut rng, 2),
                &rnd(&mut rng, 1),
                &sys,
                &q_w,
                &r_w,
                &bounds,
            );
            let (x, u, _) = solve_stage_k(&qp, 2, 1e-10, &[]).unwrap();
            let direct = solve_dense_qp(&qp, 1e-10).unwrap();
            assert!((direct.y.rows(0, 2) - x).norm() < 1e-12);
            assert!((direct.y.rows(2, 1) - u).norm() < 1e-12);
            // The successor state respects the tightened rows.
            let next = &sys.a * direct.y.rows(0, 2) + &sys.b * direct.y.rows(2, 1);
            assert!(next.amax() <= 0.8 + 1e-9);
        }
    }

    #[test]
    fn terminal_closed_form() {
        let p = DMatrix::identity(2, 2);
        let chol = Cholesky::new(p).unwrap();
        let x = solve_stage_terminal(&DVector::zeros(2), &DVector::zeros(2), &chol);
        assert!(x.norm() < 1e-15);
        let x = solve_stage_terminal(
            &DVector::from_vec(vec![4.0, 0.0]),
            &DVector::from_vec(vec![2.0, 0.0]),
            &chol,
        );
        assert!(x.norm() < 1e-15);
        let p2 = DMatrix::from_element(1, 1, 2.0);
        let chol2 = Cholesky::new(p2).unwrap();
        let x = solve_stage_terminal(&DVector::zeros(1), &DVector::from_vec(vec![1.0]), &chol2);
        assert!((x[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn consensus_zero_fixed_point() {
        let sys = scalar_system(0.9, 1.0);
        let q_w = DMatrix::identity(1, 1);
        let r_w = DMatrix::identity(1, 1);
        let p_w = DMatrix::identity(1, 1) * 2.0;
        let n = 4;
        let cache = ConsensusCache::new(&sys, &q_w, &r_w, &p_w, n);
        let zeros1 = vec![DVector::zeros(1); n];
        let zeros_z = vec![DVector::zeros(1); n + 1];
        let sol = solve_consensus(
            &cache,
            &sys,
            &q_w,
            &r_w,
            &zeros1,
            &zeros1,
            &zeros_z,
            &zeros1,
            &DVector::zeros(1),
        );
        assert!(sol.z_plus.iter().all(|z| z.norm() < 1e-14));
        assert!(sol.v_plus.iter().all(|v| v.norm() < 1e-14));
        assert!(sol.delta.iter().all(|d| d.norm() < 1e-14));
    }

    #[test]
    fn consensus_tracks_feasible_target_exactly() {
        // When the targets themselves satisfy the dynamics from x̂, the
        // tracking cost is zero and the solution reproduces them.
        let sys = LtiSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        )
        .unwrap();
        let q_w = DMatrix::identity(2, 2);
        let r_w = DMatrix::identity(1, 1);
        let p_w = DMatrix::identity(2, 2) * 3.0;
        let n = 5;
        let cache = ConsensusCache::new(&sys, &q_w, &r_w, &p_w, n);
        let x_hat = DVector::from_vec(vec![1.0, -0.5]);
        // Roll out an arbitrary input sequence.
        let b_targets: Vec<DVector<f64>> = (0..n)
            .map(|k| DVector::from_element(1, 0.3 - 0.1 * k as f64))
            .collect();
        let mut a_targets = Vec::new();
        let mut state = x_hat.clone();
        for bt in &b_targets {
            state = &sys.a * &state + &sys.b * bt;
            a_targets.push(state.clone());
        }
        // Encode targets through the 2x − z parametrization with z = v = 0.
        let x_stage: Vec<DVector<f64>> = a_targets.iter().map(|a| a * 0.5).collect();
        let u_stage: Vec<DVector<f64>> = b_targets.iter().map(|b| b * 0.5).collect();
        let z = vec![DVector::zeros(2); n + 1];
        let v = vec![DVector::zeros(1); n];
        let sol = solve_consensus(&cache, &sys, &q_w, &r_w, &x_stage, &u_stage, &z, &v, &x_hat);
        for k in 0..n {
            assert!((&sol.z_plus[k + 1] - &a_targets[k]).norm() < 1e-12);
            assert!((&sol.v_plus[k] - &b_targets[k]).norm() < 1e-12);
        }
    }

    /// Monolithic KKT oracle for the consensus problem: stack w = (z_1..z_N,
    /// v_0..v_{N-1}), eliminate z_0 = x̂, and solve the full saddle system.
    #[allow(clippy::type_complexity)]
    fn consensus_kkt_oracle(
        sys: &LtiSystem,
        q_w: &DMatrix<f64>,
        r_w: &DMatrix<f64>,
        p_w: &DMatrix<f64>,
        a_t: &[DVector<f64>],
        b_t: &[DVector<f64>],
        x_hat: &DVector<f64>,
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = b_t.len();
        let (nx, nu) = (sys.n_x(), sys.n_u());
        let nw = n * nx + n * nu;
        let ne = n * nx;
        let mut h = DMatrix::zeros(nw, nw);
        let mut f = DVector::zeros(nw);
        for k in 0..n {
            let w = if k == n - 1 { p_w } else { q_w };
            h.view_mut((k * nx, k * nx), (nx, nx)).copy_from(&(w * 2.0));
            f.rows_mut(k * nx, nx).copy_from(&(-(w * &a_t[k]) * 2.0));
            let off = n * nx + k * nu;
            h.view_mut((off, off), (nu, nu)).copy_from(&(r_w * 2.0));
            f.rows_mut(off, nu).copy_from(&(-(r_w * &b_t[k]) * 2.0));
        }
        // Rows k: z_{k+1} − A z_k − B v_k = [k = 0] A x̂.
        let mut e = DMatrix::zeros(ne, nw);
        let mut rhs = DVector::zeros(ne);
        for k in 0..n {
            for i in 0..nx {
                e[(k * nx + i, k * nx + i)] = 1.0;
            }
            if k > 0 {
                e.view_mut((k * nx, (k - 1) * nx), (nx, nx))
                    .copy_from(&(-&sys.a));
            } else {
                rhs.rows_mut(0, nx).copy_from(&(&sys.a * x_hat));
            }
            e.view_mut((k * nx, n * nx + k * nu), (nx, nu))
                .copy_from(&(-&sys.b));
        }
        // Saddle system [H Eᵀ; E 0] (w, δ) = (−f, rhs).
        let dim = nw + ne;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (nw, nw)).copy_from(&h);
        kkt.view_mut((0, nw), (nw, ne)).copy_from(&e.transpose());
        kkt.view_mut((nw, 0), (ne, nw)).copy_from(&e);
        let mut full_rhs = DVector::zeros(dim);
        full_rhs.rows_mut(0, nw).copy_from(&(-f));
        full_rhs.rows_mut(nw, ne).copy_from(&rhs);
        let sol = kkt.lu().solve(&full_rhs).unwrap();
        let zs = (0..n).map(|k| sol.rows(k * nx, nx).into_owned()).collect();
        let vs = (0..n)
            .map(|k| sol.rows(n * nx + k * nu, nu).into_owned())
            .collect();
        let ds = (0..n)
            .map(|k| sol.rows(nw + k * nx, nx).into_owned())
            .collect();
        (zs, vs, ds)
    }

    #[test]
    fn consensus_matches_monolithic_kkt() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for trial in 0..200 {
            let nx = rng.gen_range(1..=4);
            let nu = rng.gen_range(1..=2);
            let n = rng.gen_range(1..=5);
            let a_m = DMatrix::from_fn(nx, nx, |_, _| rng.gen_range(-0.6..0.6));
            let b_m = DMatrix::from_fn(nx, nu, |_, _| rng.gen_range(-1.0..1.0));
            let sys = LtiSystem::new(a_m, b_m).unwrap();
            let mk_pd = |rng: &mut rand_chacha::ChaCha8Rng, d: usize| {
                let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0f64));
                m.transpose() * &m + DMatrix::identity(d, d) * 0.5
            };
            let q_w = mk_pd(&mut rng, nx);
            let r_w = mk_pd(&mut rng, nu);
            let p_w = mk_pd(&mut rng, nx);
            let x_hat = DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0f64));
            let x_stage: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0f64)))
                .collect();
            let u_stage: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(nu, |_, _| rng.gen_range(-1.0..1.0f64)))
                .collect();
            let z: Vec<DVector<f64>> = (0..=n)
                .map(|_| DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0f64)))
                .collect();
            let v: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(nu, |_, _| rng.gen_range(-1.0..1.0f64)))
                .collect();
            let cache = ConsensusCache::new(&sys, &q_w, &r_w, &p_w, n);
            let sol = solve_consensus(&cache, &sys, &q_w, &r_w, &x_stage, &u_stage, &z, &v, &x_hat);

            let a_t: Vec<DVector<f64>> = (0..n).map(|k| &x_stage[k] * 2.0 - &z[k + 1]).collect();
            let b_t: Vec<DVector<f64>> = (0..n).map(|k| &u_stage[k] * 2.0 - &v[k]).collect();
            let (zs, vs, ds) = consensus_kkt_oracle(&sys, &q_w, &r_w, &p_w, &a_t, &b_t, &x_hat);
            for k in 0..n {
                assert!(
                    (&sol.z_plus[k + 1] - &zs[k]).norm() < 1e-9,
                    "trial {trial} primal state k={k}"
                );
                assert!((&sol.v_plus[k] - &vs[k]).norm() < 1e-9, "trial {trial}");
                assert!(
                    (&sol.delta[k] - &ds[k]).norm() < 1e-9,
                    "trial {trial} dual k={k}: got {:?} want {:?}",
                    sol.delta[k],
                    ds[k]
                );
            }
            // Dynamics are exact by construction.
            for k in 0..n {
                let resid =
                    &sol.z_plus[k + 1] - (&sys.a * &sol.z_plus[k] + &sys.b * &sol.v_plus[k]);
                assert!(resid.norm() < 1e-9);
            }
        }
    }
}
