//! Closed-loop simulation, converged reference solutions, and
//! infinite-horizon cost accounting.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::contraction::TightenedMargins;
use crate::controller::{
    delta, shift, ConstraintProfile, ControllerConfig, ControllerError, IterateTriple,
    RtiController,
};
use crate::model::{MpcProblem, PolyhedralSet};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("problem infeasible from the given state")]
    Infeasible,
    #[error("reference iteration did not converge")]
    NoConvergence,
    #[error("closed loop lost feasibility at step {step} (stage {stage})")]
    LostFeasibility { step: usize, stage: usize },
}

/// Converged primal-dual solution of the horizon problem.
#[derive(Debug, Clone)]
pub struct Reference {
    pub triple: IterateTriple,
    /// Objective value (J_N or its tightened counterpart V_N).
    pub value: f64,
}

impl TightenedMargins {
    /// Untightened bounds: the stagewise scheme with these margins solves
    /// the original constrained problem.
    pub fn raw(x_set: &PolyhedralSet, u_set: &PolyhedralSet, horizon: usize) -> Self {
        Self {
            c_hat: vec![x_set.bounds.clone(); horizon + 1],
            d_hat: vec![u_set.bounds.clone(); horizon],
        }
    }
}

/// Objective Σ z_kᵀQz_k + v_kᵀRv_k + z_NᵀPz_N of a dynamically consistent
/// iterate.
fn objective(triple: &IterateTriple, problem: &MpcProblem) -> f64 {
    let n = triple.horizon();
    let mut total = 0.0;
    for k in 0..n {
        total += triple.z[k].dot(&(&problem.q * &triple.z[k]));
        total += triple.v[k].dot(&(&problem.r * &triple.v[k]));
    }
    total + triple.z[n].dot(&(&problem.p * &triple.z[n]))
}

/// Run the inner iteration to convergence: one round at a time until the
/// change of the triple, measured in Φ, falls below `tol`.
pub fn solve_reference(
    x_hat: &DVector<f64>,
    problem: &MpcProblem,
    profile: &ConstraintProfile,
    tol: f64,
    max_iter: usize,
    init: Option<&IterateTriple>,
) -> Result<Reference, SimError> {
    let cfg = ControllerConfig {
        m_bar: 1,
        qp_tol: (tol * 1e-2).clamp(1e-13, 1e-10),
        profile: profile.clone(),
    };
    let mut ctl = RtiController::new(problem.clone(), cfg);
    let mut cur = match init {
        Some(t) => t.clone(),
        None => IterateTriple::zeros(problem.n_x(), problem.n_u(), problem.horizon),
    };
    for _ in 0..max_iter {
        let (_, next, _) = ctl.rti_step(&cur, x_hat).map_err(|e| match e {
            ControllerError::StageInfeasible { .. } => SimError::Infeasible,
            _ => SimError::NoConvergence,
        })?;
        let change = delta(
            &next,
            &cur,
            &problem.q,
            &problem.r,
            &problem.p,
            &problem.system,
        );
        cur = next;
        if change <= tol {
            let value = objective(&cur, problem);
            return Ok(Reference { triple: cur, value });
        }
    }
    Err(SimError::NoConvergence)
}

/// How a closed-loop trace ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    /// State norm fell below the stopping threshold; tail cost is exact.
    Converged,
    /// Step budget exhausted before convergence.
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    /// Visited states x_0 … x_T.
    pub states: Vec<DVector<f64>>,
    /// Applied inputs u_0 … u_{T−1}.
    pub inputs: Vec<DVector<f64>>,
    /// x_tᵀQx_t + u_tᵀRu_t per step.
    pub stage_costs: Vec<f64>,
    /// Accumulated stage cost plus the terminal tail x_TᵀPx_T.
    pub j_infinity: f64,
    /// Per-step membership of x_t in the original state set.
    pub feasible_x: Vec<bool>,
    /// Per-step membership of u_t in the original input set.
    pub feasible_u: Vec<bool>,
    pub halted: HaltReason,
}

impl ClosedLoopTrace {
    pub fn all_feasible(&self) -> bool {
        self.feasible_x.iter().all(|b| *b) && self.feasible_u.iter().all(|b| *b)
    }

    /// CSV export: t, state components, input components, stage cost and
    /// the two feasibility flags, reals at 17 significant digits.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        let nx = self.states[0].len();
        let nu = if self.inputs.is_empty() {
            0
        } else {
            self.inputs[0].len()
        };
        let mut header = vec!["t".to_string()];
        header.extend((0..nx).map(|i| format!("x{i}")));
        header.extend((0..nu).map(|i| format!("u{i}")));
        header.extend([
            "stage_cost".into(),
            "feasible_x".into(),
            "feasible_u".into(),
        ]);
        writeln!(out, "{}", header.join(","))?;
        for t in 0..self.inputs.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.states[t].iter().map(|v| format!("{v:.16e}")));
            row.extend(self.inputs[t].iter().map(|v| format!("{v:.16e}")));
            row.push(format!("{:.16e}", self.stage_costs[t]));
            row.push((self.feasible_x[t] as u8).to_string());
            row.push((self.feasible_u[t] as u8).to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Control law used by the simulator.
pub enum ClosedLoopPolicy {
    /// Fixed-iteration real-time controller (RTI in input-only profile,
    /// the recursively feasible variant in tightened profile).
    Rti(ControllerConfig),
    /// Converged solve of the original constrained problem every step.
    Exact { tol: f64, max_iter: usize },
}

pub struct SimOptions<'a> {
    pub t_max: usize,
    /// ∞-norm threshold below which the run stops and the Riccati tail is
    /// added.
    pub eps_stop: f64,
    /// Additive state perturbation hook (robustness tests only).
    #[allow(clippy::type_complexity)]
    pub disturbance: Option<&'a dyn Fn(usize, &DVector<f64>) -> DVector<f64>>,
}

impl Default for SimOptions<'_> {
    fn default() -> Self {
        Self {
            t_max: 1000,
            eps_stop: 1e-8,
            disturbance: None,
        }
    }
}

/// Gain consistent with the terminal weight, used for the exact-policy
/// shortcut; valid only if P solves the Riccati equation.
struct LqrShortcut {
    k: DMatrix<f64>,
    enabled: bool,
}

impl LqrShortcut {
    fn new(problem: &MpcProblem) -> Self {
        let (a, b) = (&problem.system.a, &problem.system.b);
        let btp = b.transpose() * &problem.p;
        let w = &problem.r + &btp * b;
        let Some(chol) = nalgebra::Cholesky::new(crate::linalg::symmetrize(&w)) else {
            return Self {
                k: DMatrix::zeros(0, 0),
                enabled: false,
            };
        };
        let k = -chol.solve(&(&btp * a));
        let resid = &problem.p - (&problem.q + a.transpose() * &problem.p * (a + b * &k));
        let enabled = resid.norm() <= 1e-8 * problem.p.norm();
        Self { k, enabled }
    }

    /// If the pure feedback rollout over the horizon is feasible for the
    /// original sets, the constrained optimum coincides with it and the
    /// first input is K x.
    fn try_apply(&self, x: &DVector<f64>, problem: &MpcProblem) -> Option<DVector<f64>> {
        if !self.enabled {
            return None;
        }
        let mut state = x.clone();
        let u0 = &self.k * x;
        for _ in 0..problem.horizon {
            let u = &self.k * &state;
            if !problem.u_set.contains(&u, 0.0) {
                return None;
            }
            state = &problem.system.a * &state + &problem.system.b * &u;
            if !problem.x_set.contains(&state, 0.0) {
                return None;
            }
        }
        Some(u0)
    }
}

/// Closed loop: at each step compute the input per policy, apply the plant
/// recursion, record cost and raw-set feasibility.
pub fn simulate_closed_loop(
    policy: ClosedLoopPolicy,
    problem: &MpcProblem,
    x0: &DVector<f64>,
    opts: &SimOptions,
) -> Result<ClosedLoopTrace, SimError> {
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::new();
    let mut stage_costs = Vec::new();
    let mut feasible_x = Vec::new();
    let mut feasible_u = Vec::new();

    enum Driver {
        Rti(Box<RtiController>, IterateTriple),
        Exact {
            tol: f64,
            max_iter: usize,
            shortcut: LqrShortcut,
            warm: Option<IterateTriple>,
        },
    }
    let mut driver = match policy {
        ClosedLoopPolicy::Rti(cfg) => {
            let it = IterateTriple::zeros(problem.n_x(), problem.n_u(), problem.horizon);
            Driver::Rti(Box::new(RtiController::new(problem.clone(), cfg)), it)
        }
        ClosedLoopPolicy::Exact { tol, max_iter } => Driver::Exact {
            tol,
            max_iter,
            shortcut: LqrShortcut::new(problem),
            warm: None,
        },
    };
    let raw_profile = ConstraintProfile::Tightened(TightenedMargins::raw(
        &problem.x_set,
        &problem.u_set,
        problem.horizon,
    ));

    let mut halted = HaltReason::MaxSteps;
    for t in 0..opts.t_max {
        let x = states[t].clone();
        if x.amax() < opts.eps_stop {
            halted = HaltReason::Converged;
            break;
        }
        let u = match &mut driver {
            Driver::Rti(ctl, it) => {
                let (u0, out, _) = ctl.rti_step(it, &x).map_err(|e| match e {
                    ControllerError::StageInfeasible { stage } => {
                        SimError::LostFeasibility { step: t, stage }
                    }
                    _ => SimError::NoConvergence,
                })?;
                *it = shift(&out);
                u0
            }
            Driver::Exact {
                tol,
                max_iter,
                shortcut,
                warm,
            } => {
                if let Some(u0) = shortcut.try_apply(&x, problem) {
                    *warm = None;
                    u0
                } else {
                    let reference =
                        solve_reference(&x, problem, &raw_profile, *tol, *max_iter, warm.as_ref())
                            .map_err(|e| match e {
                                SimError::Infeasible => {
                                    SimError::LostFeasibility { step: t, stage: 0 }
                                }
                                other => other,
                            })?;
                    let u0 = reference.triple.v[0].clone();
                    *warm = Some(shift(&reference.triple));
                    u0
                }
            }
        };
        let mut next = &problem.system.a * &x + &problem.system.b * &u;
        if let Some(d) = opts.disturbance {
            next += d(t, &x);
        }
        stage_costs.push(x.dot(&(&problem.q * &x)) + u.dot(&(&problem.r * &u)));
        feasible_x.push(problem.x_set.contains(&x, 1e-9));
        feasible_u.push(problem.u_set.contains(&u, 1e-9));
        inputs.push(u);
        states.push(next);
    }
    if states.last().unwrap().amax() < opts.eps_stop {
        halted = HaltReason::Converged;
    }
    let tail = {
        let xt = states.last().unwrap();
        xt.dot(&(&problem.p * xt))
    };
    let j_infinity = stage_costs.iter().sum::<f64>() + tail;
    Ok(ClosedLoopTrace {
        states,
        inputs,
        stage_costs,
        j_infinity,
        feasible_x,
        feasible_u,
        halted,
    })
}

/// Relative performance loss against a positive baseline cost.
pub fn performance_gap(j_test: f64, j_ref: f64) -> f64 {
    assert!(j_ref > 0.0);
    (j_test - j_ref) / j_ref
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{build_chain, ChainParams};
    use crate::model::dare_solve;
    use rand::{Rng, SeedableRng};

    fn scalar_problem(n: usize) -> MpcProblem {
        let sys = crate::model::LtiSystem::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        let p = dare_solve(&sys.a, &sys.b, &q, &r, 1e-14).unwrap().p;
        MpcProblem {
            system: sys,
            x_set: PolyhedralSet::inf_norm_box(1, 1e6),
            u_set: PolyhedralSet::inf_norm_box(1, 1e6),
            q,
            r,
            p,
            horizon: n,
        }
    }

    #[test]
    fn reference_value_matches_riccati_on_unconstrained_scalar() {
        let problem = scalar_problem(30);
        let x_hat = DVector::from_vec(vec![0.7]);
        let profile = ConstraintProfile::InputOnly;
        let reference = solve_reference(&x_hat, &problem, &profile, 1e-14, 20000, None).unwrap();
        let expected = problem.p[(0, 0)] * 0.49;
        assert!(
            (reference.value - expected).abs() < 1e-7 * expected,
            "{} vs {}",
            reference.value,
            expected
        );
    }

    #[test]
    fn reference_zero_state() {
        let problem = scalar_problem(10);
        let r = solve_reference(
            &DVector::zeros(1),
            &problem,
            &ConstraintProfile::InputOnly,
            1e-12,
            100,
            None,
        )
        .unwrap();
        assert_eq!(r.value, 0.0);
    }

    fn chain_problem() -> MpcProblem {
        let (sys, x_set, u_set) = build_chain(&ChainParams::default_n(2));
        let nx = sys.n_x();
        let nu = sys.n_u();
        let q = DMatrix::identity(nx, nx);
        let r = DMatrix::identity(nu, nu);
        let p = dare_solve(&sys.a, &sys.b, &q, &r, 1e-13).unwrap().p;
        MpcProblem {
            system: sys,
            x_set,
            u_set,
            q,
            r,
            p,
            horizon: 15,
        }
    }

    #[test]
    fn tightened_value_dominates_original() {
        let problem = chain_problem();
        let lqr = dare_solve(
            &problem.system.a,
            &problem.system.b,
            &problem.q,
            &problem.r,
            1e-13,
        )
        .unwrap();
        let beta = crate::contraction::select_beta(&problem.system, &lqr.k, None).unwrap();
        let alpha = beta.powi(problem.horizon as i32);
        let r_star = crate::contraction::max_inner_radius(
            &problem.system,
            &lqr.k,
            beta,
            alpha,
            &problem.x_set,
            &problem.u_set,
            1e-9,
        )
        .unwrap();
        let z = crate::contraction::synth_ellipsoid(
            &problem.system,
            &lqr.k,
            beta,
            r_star / 2.0,
            alpha,
            &problem.x_set,
            &problem.u_set,
        )
        .unwrap();
        let margins = crate::contraction::tighten_margins(
            &z,
            &lqr.k,
            beta,
            problem.horizon,
            &problem.x_set,
            &problem.u_set,
        )
        .unwrap();
        let raw = ConstraintProfile::Tightened(TightenedMargins::raw(
            &problem.x_set,
            &problem.u_set,
            problem.horizon,
        ));
        let tightened = ConstraintProfile::Tightened(margins);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = DVector::from_fn(problem.n_x(), |_, _| rng.gen_range(-0.6..0.6f64));
            let j = solve_reference(&x, &problem, &raw, 1e-12, 50000, None).unwrap();
            let v = solve_reference(&x, &problem, &tightened, 1e-12, 50000, None).unwrap();
            assert!(
                v.value >= j.value - 1e-8 * j.value.max(1.0),
                "{} < {}",
                v.value,
                j.value
            );
        }
    }

    #[test]
    fn origin_stays_at_origin() {
        let problem = chain_problem();
        let trace = simulate_closed_loop(
            ClosedLoopPolicy::Exact {
                tol: 1e-12,
                max_iter: 50000,
            },
            &problem,
            &DVector::zeros(problem.n_x()),
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(trace.halted, HaltReason::Converged);
        assert_eq!(trace.j_infinity, 0.0);
        assert!(trace.inputs.is_empty());
    }

    #[test]
    fn exact_policy_decays_and_rti_converges_to_it() {
        let problem = chain_problem();
        let x0 = DVector::from_fn(problem.n_x(), |i, _| if i % 2 == 0 { 1.2 } else { 0.0 });
        let opts = SimOptions {
            t_max: 400,
            eps_stop: 1e-8,
            disturbance: None,
        };
        let exact = simulate_closed_loop(
            ClosedLoopPolicy::Exact {
                tol: 1e-13,
                max_iter: 100000,
            },
            &problem,
            &x0,
            &opts,
        )
        .unwrap();
        assert_eq!(exact.halted, HaltReason::Converged);
        assert!(exact.j_infinity.is_finite());
        assert!(exact.all_feasible());
        // Cost-to-go decays after the transient (the 2-norm itself can
        // oscillate under the closed-loop dynamics).
        let values: Vec<f64> = exact
            .states
            .iter()
            .map(|x| x.dot(&(&problem.p * x)))
            .collect();
        let t0 = 20.min(values.len() - 1);
        for t in t0..values.len() - 1 {
            assert!(values[t + 1] <= values[t] + 1e-9, "t={t}");
        }

        // High-iteration RTI matches the exact baseline closely.
        let raw = TightenedMargins::raw(&problem.x_set, &problem.u_set, problem.horizon);
        let rti = simulate_closed_loop(
            ClosedLoopPolicy::Rti(ControllerConfig {
                m_bar: 800,
                qp_tol: 1e-11,
                profile: ConstraintProfile::Tightened(raw),
            }),
            &problem,
            &x0,
            &opts,
        )
        .unwrap();
        let gap = performance_gap(rti.j_infinity, exact.j_infinity);
        assert!(gap.abs() < 1e-6, "gap {gap}");
    }

    #[test]
    fn gap_arithmetic() {
        assert_eq!(performance_gap(2.0, 2.0), 0.0);
        assert!((performance_gap(2.002, 2.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trips_shape() {
        let problem = scalar_problem(5);
        let trace = simulate_closed_loop(
            ClosedLoopPolicy::Exact {
                tol: 1e-12,
                max_iter: 10000,
            },
            &problem,
            &DVector::from_vec(vec![0.4]),
            &SimOptions {
                t_max: 50,
                eps_stop: 1e-8,
                disturbance: None,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x0,u0,stage_cost,feasible_x,feasible_u");
        assert_eq!(lines.len() - 1, trace.inputs.len());
        assert!(lines[1].contains('e'));
    }
}
