//! Command-line front end for the parallel real-time MPC toolkit: chain
//! model generation, contraction synthesis, closed-loop runs, and the
//! benchmark sweeps comparing the recursively feasible scheme against an
//! exact baseline and a heuristic fixed-iteration controller.

pub mod commands;
pub mod config;
pub mod pipeline;

use rfmpc_core::simulation::SimOptions;

pub trait SimOptionsExt {
    fn sim_options(&self) -> SimOptions<'static>;
}

impl SimOptionsExt for config::BenchConfig {
    fn sim_options(&self) -> SimOptions<'static> {
        SimOptions {
            t_max: self.t_max,
            eps_stop: self.eps_stop,
            disturbance: None,
        }
    }
}
