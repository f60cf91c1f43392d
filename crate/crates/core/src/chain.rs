//! Spring-mass-damper chain benchmark plant.
//!
//! n carts in a row, each with its own actuator. Cart 1 is attached to a
//! wall through a spring, neighbouring carts are coupled by identical
//! springs, and the far end is free. Euler discretization with step h:
//!
//!   p_i⁺ = p_i + h v_i
//!   v_i⁺ = v_i + (h/m) (k_s (p_{i-1} - 2 p_i + p_{i+1}) - k_d v_i + u_i)
//!
//! with boundary conditions p_0 = 0 and p_{n+1} = p_n. The state ordering
//! is (p_1, v_1, p_2, v_2, ..., p_n, v_n).

use nalgebra::DMatrix;

use crate::model::{LtiSystem, PolyhedralSet};

#[derive(Debug, Clone)]
pub struct ChainParams {
    /// Number of carts.
    pub n: usize,
    /// Discretization step.
    pub h: f64,
    /// Cart mass.
    pub mass: f64,
    /// Spring constant.
    pub k_s: f64,
    /// Damping constant.
    pub k_d: f64,
    /// ∞-norm bound on the state.
    pub x_bound: f64,
    /// ∞-norm bound on the input.
    pub u_bound: f64,
}

impl ChainParams {
    /// Benchmark defaults with a chosen cart count.
    pub fn default_n(n: usize) -> Self {
        Self {
            n,
            h: 0.1,
            mass: 1.0,
            k_s: 1.0,
            k_d: 1.0,
            x_bound: 2.5,
            u_bound: 1.0,
        }
    }
}

impl Default for ChainParams {
    fn default() -> Self {
        Self::default_n(60)
    }
}

/// Assemble the chain plant and its box constraint sets.
pub fn build_chain(p: &ChainParams) -> (LtiSystem, PolyhedralSet, PolyhedralSet) {
    assert!(p.n >= 1, "chain needs at least one cart");
    let n = p.n;
    let nx = 2 * n;
    let mut a = DMatrix::<f64>::identity(nx, nx);
    let mut b = DMatrix::<f64>::zeros(nx, n);
    let hm = p.h / p.mass;
    for i in 0..n {
        let (pi, vi) = (2 * i, 2 * i + 1);
        a[(pi, vi)] = p.h;
        // Spring force k_s (p_{i-1} - 2 p_i + p_{i+1}); the wall pins
        // p_0 = 0, the free end mirrors p_{n+1} = p_n.
        let mut self_coeff = -2.0;
        if i > 0 {
            a[(vi, 2 * (i - 1))] += hm * p.k_s;
        }
        if i + 1 < n {
            a[(vi, 2 * (i + 1))] += hm * p.k_s;
        } else {
            self_coeff += 1.0;
        }
        a[(vi, pi)] += hm * p.k_s * self_coeff;
        a[(vi, vi)] -= hm * p.k_d;
        b[(vi, i)] = hm;
    }
    let sys = LtiSystem::new(a, b).expect("chain dimensions are consistent by construction");
    let x_set = PolyhedralSet::inf_norm_box(nx, p.x_bound);
    let u_set = PolyhedralSet::inf_norm_box(n, p.u_bound);
    (sys, x_set, u_set)
}
