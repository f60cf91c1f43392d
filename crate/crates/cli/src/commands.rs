//! Subcommand implementations. Each returns a process exit code:
//! 0 success, 2 validation failure, 3 radius too large, 4 feasibility
//! loss in a closed loop. Usage errors (code 1) are handled by the
//! argument parser in the binary.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rfmpc_core::contraction::{verify_design, ContractionError};
use rfmpc_core::design_io::{read_design, write_design};
use rfmpc_core::model::validate_problem;
use rfmpc_core::simulation::{performance_gap, simulate_closed_loop, HaltReason, SimError};
use rfmpc_core::{
    ClosedLoopPolicy, ClosedLoopTrace, ConstraintProfile, ContractionDesign, ControllerConfig,
    MpcProblem, TightenedMargins,
};

use crate::config::BenchConfig;
use crate::pipeline::{build_problem, initial_state, synthesize, SynthError};
use crate::SimOptionsExt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    InputOnly,
    Tightened,
}

fn load_config(path: &Path) -> Result<BenchConfig, i32> {
    BenchConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        2
    })
}

fn load_design(path: &Path) -> Result<(ContractionDesign, TightenedMargins), i32> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read design file {}: {e}", path.display());
        2
    })?;
    read_design(&text).map_err(|e| {
        eprintln!("error: {e}");
        2
    })
}

pub fn cmd_synth(config_path: &Path, out_path: &Path) -> i32 {
    let cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let out = match synthesize(&cfg) {
        Ok(out) => out,
        Err(SynthError::Contraction(ContractionError::RadiusTooLarge { suggested })) => {
            eprintln!(
                "error: requested inner radius too large; largest admissible r = {suggested:.12e}"
            );
            return 3;
        }
        Err(SynthError::Contraction(e @ ContractionError::InvalidBeta { .. })) => {
            eprintln!("error: InvalidBeta: {e}");
            return 2;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let mut violations = validate_problem(&out.problem);
    violations.extend(verify_design(
        &out.design,
        &out.problem.system,
        &out.problem.x_set,
        &out.problem.u_set,
        cfg.horizon,
    ));
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return 2;
    }
    let mut buf = Vec::new();
    if let Err(e) = write_design(&out.design, &out.margins, &mut buf) {
        eprintln!("error: {e}");
        return 2;
    }
    if let Err(e) = std::fs::write(out_path, &buf) {
        eprintln!("error: cannot write {}: {e}", out_path.display());
        return 2;
    }
    println!("synthesis report");
    println!("  rho(A+BK) = {:.12e}", out.rho);
    println!("  beta      = {:.12e}", out.design.beta);
    println!("  r         = {:.12e}", out.design.r);
    println!("  alpha     = {:.12e}", out.design.alpha);
    println!("  sigma     = {:.12e}", out.design.sigma);
    println!("  trace(Z)  = {:.12e}", out.design.z.trace());
    println!("design written to {}", out_path.display());
    0
}

fn profile_for(
    mode: Mode,
    design_path: Option<&Path>,
    problem: &MpcProblem,
) -> Result<ConstraintProfile, i32> {
    match mode {
        Mode::InputOnly => Ok(ConstraintProfile::InputOnly),
        Mode::Tightened => {
            let Some(path) = design_path else {
                eprintln!("error: tightened mode requires --design");
                return Err(2);
            };
            let (design, margins) = load_design(path)?;
            if margins.horizon() != problem.horizon {
                eprintln!(
                    "error: design horizon {} does not match configured horizon {}",
                    margins.horizon(),
                    problem.horizon
                );
                return Err(2);
            }
            if design.k.ncols() != problem.n_x() {
                eprintln!("error: design dimensions do not match the configured chain");
                return Err(2);
            }
            Ok(ConstraintProfile::Tightened(margins))
        }
    }
}

fn write_trace_csv(trace: &ClosedLoopTrace, path: &Path) -> Result<(), i32> {
    let mut buf = Vec::new();
    if let Err(e) = trace.write_csv(&mut buf) {
        eprintln!("error: {e}");
        return Err(2);
    }
    std::fs::write(path, &buf).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        2
    })
}

pub fn cmd_run(
    config_path: &Path,
    design_path: Option<&Path>,
    mode: Mode,
    m_bar: usize,
    out_csv: Option<&Path>,
) -> i32 {
    let cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let (problem, _) = match build_problem(&cfg) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let profile = match profile_for(mode, design_path, &problem) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let policy = ClosedLoopPolicy::Rti(ControllerConfig {
        m_bar,
        qp_tol: cfg.qp_tol,
        profile,
    });
    let x0 = initial_state(&cfg, problem.n_x());
    let opts = cfg.sim_options();
    let trace = match simulate_closed_loop(policy, &problem, &x0, &opts) {
        Ok(t) => t,
        Err(SimError::LostFeasibility { step, stage }) => {
            eprintln!("feasibility lost at step {step} (stage {stage})");
            return 4;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(path) = out_csv {
        if let Err(code) = write_trace_csv(&trace, path) {
            return code;
        }
        println!("trace written to {}", path.display());
    }
    let feasible = if trace.all_feasible() { "yes" } else { "no" };
    let converged = matches!(trace.halted, HaltReason::Converged);
    println!(
        "J_inf = {:.12e}  steps = {}  feasible = {}  converged = {}",
        trace.j_infinity,
        trace.inputs.len(),
        feasible,
        converged
    );
    0
}

fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct BenchRow {
    pub m_bar: usize,
    pub j_exact: f64,
    pub j_rfrti: f64,
    pub j_rti: f64,
    pub gap_rfrti: f64,
    pub gap_rfrti_vs_rti: f64,
}

pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("m_bar,J_exact,J_rfrti,J_rti,gap_rfrti,gap_rfrti_vs_rti\n");
        for row in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.m_bar,
                sig17(row.j_exact),
                sig17(row.j_rfrti),
                sig17(row.j_rti),
                sig17(row.gap_rfrti),
                sig17(row.gap_rfrti_vs_rti)
            ));
        }
        s
    }
}

/// Closed-loop cost of a fixed-iteration controller on the configured
/// instance. Returns the trace so callers can inspect feasibility flags.
fn run_policy(
    problem: &MpcProblem,
    cfg: &BenchConfig,
    policy: ClosedLoopPolicy,
) -> Result<ClosedLoopTrace, SimError> {
    let x0 = initial_state(cfg, problem.n_x());
    simulate_closed_loop(policy, problem, &x0, &cfg.sim_options())
}

/// Exact baseline once, then RFRTI (tightened) and heuristic RTI
/// (input-only) for each entry of the sweep. Wall times go to the report
/// writer, never into the rows, so the CSV is reproducible.
pub fn run_bench(
    problem: &MpcProblem,
    margins: &TightenedMargins,
    cfg: &BenchConfig,
    mut report: impl FnMut(String),
) -> Result<BenchReport, SimError> {
    let t0 = Instant::now();
    let exact = run_policy(
        problem,
        cfg,
        ClosedLoopPolicy::Exact {
            tol: cfg.ref_tol,
            max_iter: cfg.ref_max_iter,
        },
    )?;
    report(format!(
        "exact baseline: J = {:.12e}, {} steps, {:.2?}",
        exact.j_infinity,
        exact.inputs.len(),
        t0.elapsed()
    ));
    let mut rows = Vec::new();
    for &m_bar in &cfg.m_bar_sweep {
        let t1 = Instant::now();
        let rfrti = run_policy(
            problem,
            cfg,
            ClosedLoopPolicy::Rti(ControllerConfig {
                m_bar,
                qp_tol: cfg.qp_tol,
                profile: ConstraintProfile::Tightened(margins.clone()),
            }),
        )?;
        let rti = run_policy(
            problem,
            cfg,
            ClosedLoopPolicy::Rti(ControllerConfig {
                m_bar,
                qp_tol: cfg.qp_tol,
                profile: ConstraintProfile::InputOnly,
            }),
        )?;
        let elapsed = t1.elapsed();
        let iterations = m_bar * (rfrti.inputs.len() + rti.inputs.len());
        report(format!(
            "m_bar = {m_bar}: {:.2?} for both controllers ({:.3} ms per inner iteration)",
            elapsed,
            1e3 * elapsed.as_secs_f64() / iterations.max(1) as f64
        ));
        rows.push(BenchRow {
            m_bar,
            j_exact: exact.j_infinity,
            j_rfrti: rfrti.j_infinity,
            j_rti: rti.j_infinity,
            gap_rfrti: performance_gap(rfrti.j_infinity, exact.j_infinity),
            gap_rfrti_vs_rti: performance_gap(rfrti.j_infinity, rti.j_infinity),
        });
    }
    Ok(BenchReport { rows })
}

pub fn cmd_bench(config_path: &Path, design_path: Option<&Path>, out_csv: &Path) -> i32 {
    let cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    // A design file skips the synthesis stage; otherwise synthesize here.
    let (problem, margins) = if let Some(path) = design_path {
        let (problem, _) = match build_problem(&cfg) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        };
        match profile_for(Mode::Tightened, Some(path), &problem) {
            Ok(ConstraintProfile::Tightened(m)) => (problem, m),
            Ok(ConstraintProfile::InputOnly) => unreachable!(),
            Err(code) => return code,
        }
    } else {
        match synthesize(&cfg) {
            Ok(out) => (out.problem, out.margins),
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        }
    };
    let result = run_bench(&problem, &margins, &cfg, |line| println!("{line}"));
    let bench = match result {
        Ok(b) => b,
        Err(SimError::LostFeasibility { step, stage }) => {
            eprintln!("feasibility lost at step {step} (stage {stage})");
            return 4;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let csv = bench.to_csv();
    if let Err(e) = std::fs::File::create(out_csv).and_then(|mut f| f.write_all(csv.as_bytes())) {
        eprintln!("error: cannot write {}: {e}", out_csv.display());
        return 2;
    }
    println!("bench results written to {}", out_csv.display());
    0
}

pub fn cmd_verify(config_path: &Path, design_path: &Path) -> i32 {
    let cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let (problem, _) = match build_problem(&cfg) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let (design, margins) = match load_design(design_path) {
        Ok(d) => d,
        Err(code) => return code,
    };
    let mut violations = Vec::new();
    if design.k.ncols() != problem.n_x() || design.k.nrows() != problem.n_u() {
        violations.push("gain dimensions do not match the configured chain".to_string());
    } else {
        violations.extend(verify_design(
            &design,
            &problem.system,
            &problem.x_set,
            &problem.u_set,
            cfg.horizon,
        ));
        if margins.horizon() != problem.horizon {
            violations.push(format!(
                "margin horizon {} does not match configured horizon {}",
                margins.horizon(),
                problem.horizon
            ));
        } else {
            // Stored margins must reproduce the tightening formula for the
            // stored (Z, K, beta).
            match rfmpc_core::contraction::tighten_margins(
                &design.z,
                &design.k,
                design.beta,
                cfg.horizon,
                &problem.x_set,
                &problem.u_set,
            ) {
                Ok(expected) => {
                    let close = |a: &[nalgebra::DVector<f64>], b: &[nalgebra::DVector<f64>]| {
                        a.iter()
                            .zip(b)
                            .all(|(x, y)| (x - y).amax() <= 1e-9 * (1.0 + y.amax()))
                    };
                    if !close(&margins.c_hat, &expected.c_hat)
                        || !close(&margins.d_hat, &expected.d_hat)
                    {
                        violations
                            .push("stored margins deviate from the tightening formula".to_string());
                    }
                }
                Err(e) => violations.push(format!("margin recomputation failed: {e}")),
            }
        }
    }
    if violations.is_empty() {
        println!("design file passes the invariant suite");
        0
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        2
    }
}
