use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rfmpc_cli::commands::{self, Mode};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "input_only", alias = "input-only")]
    InputOnly,
    Tightened,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::InputOnly => Mode::InputOnly,
            ModeArg::Tightened => Mode::Tightened,
        }
    }
}

#[derive(Parser)]
#[command(name = "rfmpc", about = "Recursively feasible real-time MPC toolkit")]
struct Cli {
    /// Worker threads for the parallel stage solves (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed override (reserved for randomized studies; runs are
    /// deterministic either way).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a contraction design and tightened margins.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one closed loop and export the trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tightened")]
        mode: ModeArg,
        #[arg(long, default_value_t = 10)]
        mbar: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep inner-iteration counts against the exact baseline.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a design file against the full invariant suite.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        design: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are not usage errors.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: cannot configure {workers} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let code = match cli.cmd {
        Cmd::Synth { config, out } => commands::cmd_synth(&config, &out),
        Cmd::Run {
            config,
            design,
            mode,
            mbar,
            out,
        } => {
            if mbar == 0 {
                eprintln!("error: --mbar must be at least 1");
                1
            } else {
                commands::cmd_run(
                    &config,
                    design.as_deref(),
                    mode.into(),
                    mbar,
                    out.as_deref(),
                )
            }
        }
        Cmd::Bench {
            config,
            design,
            out,
        } => commands::cmd_bench(&config, design.as_deref(), &out),
        Cmd::Verify { config, design } => commands::cmd_verify(&config, &design),
    };
    ExitCode::from(code as u8)
}
