//! Configuration to controller objects: chain assembly, horizon problem
//! construction, and the offline contraction synthesis pipeline.

use nalgebra::{DMatrix, DVector};

use rfmpc_core::chain::{self, ChainParams};
use rfmpc_core::contraction::{
    max_inner_radius_direct, select_beta, synth_ellipsoid, tighten_margins, ContractionError,
};
use rfmpc_core::model::{compute_sigma, dare_solve, spectral_radius, ModelError};
use rfmpc_core::{
    ContractionDesign, LtiSystem, MpcProblem, PolyhedralSet, RiccatiSolution, TightenedMargins,
};

use crate::config::BenchConfig;

const DARE_TOL: f64 = 1e-13;

pub fn chain_params(cfg: &BenchConfig) -> ChainParams {
    ChainParams {
        n: cfg.n_carts,
        h: cfg.h,
        mass: cfg.m_mass,
        k_s: cfg.k_s,
        k_d: cfg.k_d,
        x_bound: cfg.x_bar,
        u_bound: cfg.u_bar,
    }
}

pub fn build_chain(cfg: &BenchConfig) -> (LtiSystem, PolyhedralSet, PolyhedralSet) {
    chain::build_chain(&chain_params(cfg))
}

/// Horizon problem with identity stage weights and the Riccati terminal
/// weight, as in the case study.
pub fn build_problem(cfg: &BenchConfig) -> Result<(MpcProblem, RiccatiSolution), ModelError> {
    let (system, x_set, u_set) = build_chain(cfg);
    let q = DMatrix::identity(system.n_x(), system.n_x());
    let r = DMatrix::identity(system.n_u(), system.n_u());
    let lqr = dare_solve(&system.a, &system.b, &q, &r, DARE_TOL)?;
    let problem = MpcProblem {
        system,
        x_set,
        u_set,
        q,
        r,
        p: lqr.p.clone(),
        horizon: cfg.horizon,
    };
    Ok((problem, lqr))
}

pub fn initial_state(cfg: &BenchConfig, n_x: usize) -> DVector<f64> {
    DVector::from_element(n_x, cfg.x0_scale)
}

#[derive(Debug)]
pub enum SynthError {
    Model(ModelError),
    Contraction(ContractionError),
}

impl std::fmt::Display for SynthError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SynthError::Model(e) => write!(f, "{e}"),
            SynthError::Contraction(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SynthError {}

pub struct SynthOutput {
    pub problem: MpcProblem,
    pub design: ContractionDesign,
    pub margins: TightenedMargins,
    /// Spectral radius of A + BK, reported alongside beta.
    pub rho: f64,
}

/// Offline pipeline: LQR gain, contraction factor, ellipsoid, margins.
///
/// Free parameters left unset in the config get conservative defaults:
/// beta at the midpoint of (rho, 1), alpha = beta^N, and r at half the
/// largest admissible inner radius.
pub fn synthesize(cfg: &BenchConfig) -> Result<SynthOutput, SynthError> {
    let (problem, lqr) = build_problem(cfg).map_err(SynthError::Model)?;
    let system = &problem.system;
    let beta = select_beta(system, &lqr.k, cfg.beta).map_err(SynthError::Contraction)?;
    let alpha = cfg.alpha.unwrap_or_else(|| beta.powi(cfg.horizon as i32));
    let r = match cfg.r {
        Some(r) => r,
        None => {
            0.5 * max_inner_radius_direct(
                system,
                &lqr.k,
                beta,
                alpha,
                &problem.x_set,
                &problem.u_set,
            )
            .map_err(SynthError::Contraction)?
        }
    };
    let z = synth_ellipsoid(
        system,
        &lqr.k,
        beta,
        r,
        alpha,
        &problem.x_set,
        &problem.u_set,
    )
    .map_err(SynthError::Contraction)?;
    let sigma = compute_sigma(&system.b, &problem.q, &problem.r);
    let margins = tighten_margins(
        &z,
        &lqr.k,
        beta,
        cfg.horizon,
        &problem.x_set,
        &problem.u_set,
    )
    .map_err(SynthError::Contraction)?;
    let rho = spectral_radius(&(&system.a + &system.b * &lqr.k), 1e-12);
    let design = ContractionDesign {
        k: lqr.k,
        beta,
        z,
        r,
        alpha,
        sigma,
        kappa_hat: None,
    };
    Ok(SynthOutput {
        problem,
        design,
        margins,
        rho,
    })
}
