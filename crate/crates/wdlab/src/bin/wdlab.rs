//! Command-line front end: one subcommand per experiment, each a thin
//! wrapper over `wdlab::harness::run_experiment`.
//!
//! Exit codes: 0 all checks passed, 2 statistical check failed,
//! 3 configuration error, 4 i/o error.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use wdlab::constants::BetaRequest;
use wdlab::harness::{init_thread_pool, run_experiment, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(
    name = "wdlab",
    about = "Monte Carlo laboratory for weak-disorder polymer fluctuations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the mollifier and covariance-kernel radial tables.
    Kernel(CommonArgs),
    /// Evaluate the constants bundle (green mass, beta0, sigma^2, c2, c3).
    Constants(CommonArgs),
    /// Covariance decay of the limit partition function.
    Covariance(CommonArgs),
    /// L^2 convergence-rate curve and log-log slope.
    Rate(CommonArgs),
    /// Compensated endpoint-overlap mean E[L_T].
    Elt(CommonArgs),
    /// Four-path second moment E[L_T^2].
    Elt2(CommonArgs),
    /// Quenched fluctuation statistic across environments.
    Clt(CommonArgs),
    /// Quenched compensated-bracket statistic across environments.
    Bracket(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Spatial dimension (>= 3).
    #[arg(long)]
    d: Option<u32>,
    /// Absolute disorder strength.
    #[arg(long, conflicts_with = "beta_fraction")]
    beta: Option<f64>,
    /// Disorder strength as a fraction of the computed beta0 bound.
    #[arg(long)]
    beta_fraction: Option<f64>,
    /// Horizon grid (repeatable).
    #[arg(long = "T", value_name = "T")]
    t: Vec<f64>,
    /// Fluctuation ratios for clt (repeatable).
    #[arg(long)]
    tau: Vec<f64>,
    /// Separation norms for covariance (repeatable).
    #[arg(long)]
    x: Vec<f64>,
    /// Monte Carlo samples for oracle experiments.
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    n_env: Option<u64>,
    #[arg(long)]
    n_paths: Option<u64>,
    /// Path time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Noise cell size.
    #[arg(long)]
    h: Option<f64>,
    /// Horizon truncating the occupation integrals.
    #[arg(long)]
    tcut: Option<f64>,
    /// Kernel table resolution (points per unit radius).
    #[arg(long)]
    n_r: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; sibling artifacts and a JSON summary land next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Constants bundle (required by elt, elt2, clt, bracket).
    #[arg(long)]
    constants: Option<PathBuf>,
}

fn build_config(kind: ExperimentKind, args: &CommonArgs) -> wdlab::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(kind),
    };
    cfg.experiment = kind;
    if let Some(d) = args.d {
        cfg.d = d;
    }
    if let Some(b) = args.beta {
        cfg.beta = BetaRequest::Absolute(b);
    }
    if let Some(f) = args.beta_fraction {
        cfg.beta = BetaRequest::FractionOfBound(f);
    }
    if !args.t.is_empty() {
        cfg.t_grid = args.t.clone();
    }
    if !args.tau.is_empty() {
        cfg.tau_grid = args.tau.clone();
    }
    if !args.x.is_empty() {
        cfg.x_grid = args.x.clone();
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(n) = args.n_env {
        cfg.n_env = n;
    }
    if let Some(n) = args.n_paths {
        cfg.n_paths = n;
    }
    if args.dt.is_some() {
        cfg.dt = args.dt;
    }
    if let Some(h) = args.h {
        cfg.h = h;
    }
    if let Some(t) = args.tcut {
        cfg.t_cut = t;
    }
    if let Some(n_r) = args.n_r {
        cfg.n_r = n_r;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    if args.constants.is_some() {
        cfg.constants = args.constants.clone();
    }
    Ok(cfg)
}

fn main() {
    init_thread_pool();
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Kernel(a) => (ExperimentKind::Kernel, a),
        Command::Constants(a) => (ExperimentKind::Constants, a),
        Command::Covariance(a) => (ExperimentKind::Covariance, a),
        Command::Rate(a) => (ExperimentKind::Rate, a),
        Command::Elt(a) => (ExperimentKind::Elt, a),
        Command::Elt2(a) => (ExperimentKind::Elt2, a),
        Command::Clt(a) => (ExperimentKind::Clt, a),
        Command::Bracket(a) => (ExperimentKind::Bracket, a),
    };

    let cfg = match build_config(kind, args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    };
    match run_experiment(&cfg) {
        Ok(output) => {
            for r in &output.records {
                let status = match r.pass {
                    Some(true) => "pass",
                    Some(false) => "FAIL",
                    None => "info",
                };
                let target = r
                    .target
                    .map(|t| format!(" target {t:.6e}"))
                    .unwrap_or_default();
                println!(
                    "[{status}] {} {}: {:.6e} +- {:.3e}{target}",
                    r.experiment, r.params, r.estimate, r.std_error
                );
            }
            if !output.all_pass() {
                std::process::exit(2);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
