//! `kfgrad` — Kalman filter gradients from the command line.
//!
//! Subcommands: `simulate` (synthetic trajectories), `grad` (parameter
//! gradients of a loss via backward, forward-sensitivity or finite
//! differences), `check` (three-way gradient audit), `fit` (maximum-
//! likelihood covariance fitting in square-root form), `bench` (runtime
//! comparison of the gradient methods).
//!
//! Exit codes: 0 success, 1 check tolerance failure, 2 usage error,
//! 3 numerical failure (lost positive definiteness), 4 I/O failure.

mod commands;
mod data;
mod model_file;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Tolerance breach in `check` (exit 1).
    Tolerance(String),
    /// Bad flags, malformed files, inconsistent dimensions (exit 2).
    Usage(String),
    /// Numerical failure, e.g. an innovation covariance that is not
    /// positive definite (exit 3).
    Numerical(String),
    /// Filesystem / serialization trouble (exit 4).
    Io(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Tolerance(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Tolerance(m)
            | CliError::Usage(m)
            | CliError::Numerical(m)
            | CliError::Io(m) => m,
        }
    }
}

impl From<kfgrad::Error> for CliError {
    fn from(e: kfgrad::Error) -> Self {
        if e.is_not_positive_definite() {
            CliError::Numerical(e.to_string())
        } else if matches!(e, kfgrad::Error::Io(_)) {
            CliError::Io(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(
    name = "kfgrad",
    version,
    about = "Exact reverse-mode gradients and maximum-likelihood tuning for linear Kalman filters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a constant-velocity trajectory with noisy accelerations and
    /// noisy position measurements; writes a CSV and a metadata JSON.
    Simulate(SimulateArgs),
    /// Compute loss gradients w.r.t. the filter's tuning parameters.
    Grad(GradArgs),
    /// Audit backward gradients against forward sensitivities and finite
    /// differences; exits nonzero on tolerance breach.
    Check(CheckArgs),
    /// Fit covariance parameters by gradient descent on their Cholesky
    /// factors; writes a report JSON and a loss-history CSV.
    Fit(FitArgs),
    /// Benchmark the gradient methods across state dimensions.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Number of time steps.
    #[arg(long, default_value_t = 1440)]
    n: usize,
    /// Time step.
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    /// RNG seed (ChaCha8 stream).
    #[arg(long, env = "KFGRAD_SEED", default_value_t = kfgrad::sim::DEFAULT_SEED)]
    seed: u64,
    /// Number of position/velocity axes (state dimension is twice this).
    #[arg(long, default_value_t = 3)]
    axes: usize,
    /// Output prefix; writes <prefix>.csv and <prefix>.meta.json.
    #[arg(long)]
    out_prefix: String,
}

#[derive(Args)]
pub struct GradArgs {
    /// Model description JSON.
    #[arg(long)]
    model: std::path::PathBuf,
    /// Measurement CSV (defaults to the path named in the model file).
    #[arg(long)]
    data: Option<std::path::PathBuf>,
    /// Loss: innovation NLL or squared error against truth columns.
    #[arg(long, value_parser = ["nll", "mse"], default_value = "nll")]
    loss: String,
    /// Gradient method.
    #[arg(long, value_parser = ["backward", "sensitivity", "fd"], default_value = "backward")]
    method: String,
    /// Which gradient to emit.
    #[arg(long, value_parser = ["P0", "Q", "R", "x0", "y", "all"], default_value = "all")]
    target: String,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args)]
pub struct CheckArgs {
    #[arg(long)]
    model: std::path::PathBuf,
    #[arg(long)]
    data: Option<std::path::PathBuf>,
    #[arg(long, value_parser = ["nll", "mse"], default_value = "nll")]
    loss: String,
    /// Tolerance against the finite-difference oracle.
    #[arg(long, default_value_t = 1e-5)]
    tol_fd: f64,
    /// Tolerance against forward sensitivities.
    #[arg(long, default_value_t = 1e-8)]
    tol_fwd: f64,
    /// Print the backward gradients as JSON before the audit table.
    #[arg(long)]
    print_grads: bool,
    /// Corrupt the backward gradient before comparing (negative control).
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long)]
    model: std::path::PathBuf,
    #[arg(long)]
    data: Option<std::path::PathBuf>,
    #[arg(long, value_parser = ["nll", "mse"], default_value = "nll")]
    loss: String,
    /// Comma-separated subset of R,Q,P0.
    #[arg(long, default_value = "R")]
    targets: String,
    /// Fixed gradient-descent step size.
    #[arg(long, default_value_t = 0.005)]
    alpha: f64,
    /// Number of iterations.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Relative loss-decrease stopping threshold (0 disables).
    #[arg(long, default_value_t = 0.0)]
    stop_tol: f64,
    /// Output prefix; writes <prefix>.fit.json and <prefix>.history.csv.
    #[arg(long)]
    out_prefix: String,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Comma-separated even state dimensions.
    #[arg(long, default_value = "2,4,6,8")]
    dims: String,
    /// Trajectory length.
    #[arg(long, default_value_t = 1440)]
    n: usize,
    /// Timed repetitions per cell (median reported).
    #[arg(long, default_value_t = 9)]
    reps: usize,
    /// Comma-separated subset of backward,sensitivity,fd.
    #[arg(long, default_value = "backward,sensitivity")]
    methods: String,
    #[arg(long, env = "KFGRAD_SEED", default_value_t = kfgrad::sim::DEFAULT_SEED)]
    seed: u64,
    /// Output CSV path (stdout table is always printed).
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate(args) => commands::simulate(args),
        Cmd::Grad(args) => commands::grad(args),
        Cmd::Check(args) => commands::check(args),
        Cmd::Fit(args) => commands::fit(args),
        Cmd::Bench(args) => commands::bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
