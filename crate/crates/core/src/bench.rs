//! Timing harness comparing the cost of one full `R`-gradient computation
//! across methods and state dimensions.
//!
//! Each cell builds a constant-velocity model with `d/2` axes, simulates a
//! trajectory, then measures the median wall time of computing the complete
//! gradient of the innovation NLL w.r.t. `R` — forward filter pass included
//! in every method — together with the kernel's multiply count. The backward
//! pass visits the tape once; forward sensitivity and finite differences pay
//! one pass per free entry, which is the scaling gap under test.

use std::time::Instant;

use crate::backprop::backward;
use crate::fd::{fd_full, FdConfig};
use crate::filter::{run_filter, FilterModel};
use crate::loss::NllLoss;
use crate::mat::Mat;
use crate::sensitivity::{full_gradient_forward, ParamTarget};
use crate::sim::{simulate, SimConfig};
use crate::{counter, Error, Result};

/// Gradient computation method under measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Backward,
    Sensitivity,
    Fd,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Backward => "backward",
            BenchMethod::Sensitivity => "sensitivity",
            BenchMethod::Fd => "fd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "backward" => Ok(BenchMethod::Backward),
            "sensitivity" => Ok(BenchMethod::Sensitivity),
            "fd" => Ok(BenchMethod::Fd),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// One measured benchmark cell.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub d: usize,
    pub m: usize,
    pub n_steps: usize,
    pub repetitions: usize,
    pub median_wall_ms: f64,
    pub multiplies: u64,
}

/// All cells plus derived ratio accessors.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    fn median_of(&self, method: BenchMethod, d: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.d == d)
            .map(|r| r.median_wall_ms)
    }

    /// Wall-time ratio of a method against the backward pass at dimension `d`.
    pub fn ratio_vs_backward(&self, method: BenchMethod, d: usize) -> Option<f64> {
        let base = self.median_of(BenchMethod::Backward, d)?;
        Some(self.median_of(method, d)? / base)
    }

    /// CSV with a derived `ratio_vs_backward` column, ready for log-scale
    /// plotting.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "method,d,m,n,repetitions,median_wall_ms,multiplies,ratio_vs_backward\n",
        );
        for row in &self.rows {
            let ratio = self
                .ratio_vs_backward(row.method, row.d)
                .map_or(String::new(), |r| format!("{r:.3}"));
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{},{}\n",
                row.method.name(),
                row.d,
                row.m,
                row.n_steps,
                row.repetitions,
                row.median_wall_ms,
                row.multiplies,
                ratio
            ));
        }
        out
    }
}

/// Build the benchmark instance for an even state dimension `d`: the
/// constant-velocity model with `d/2` axes, measurement noise guessed at its
/// true value, and a seeded simulated trajectory of `n_steps` measurements.
pub fn bench_instance(d: usize, n_steps: usize, seed: u64) -> Result<(FilterModel<f64>, Vec<Mat<f64>>)> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "benchmark dimension must be a positive even number, got {d}"
        )));
    }
    let mut cfg = SimConfig::<f64>::for_axes(d / 2);
    cfg.n_steps = n_steps;
    cfg.seed = seed;
    let traj = simulate(&cfg)?;
    let model = model_guess(&cfg, traj.inputs)?;
    Ok((model, traj.measurements))
}

fn model_guess(
    cfg: &SimConfig<f64>,
    inputs: Vec<Mat<f64>>,
) -> Result<FilterModel<f64>> {
    crate::sim::model_from_sim(cfg, cfg.r_true.clone(), inputs)
}

fn compute_r_gradient(
    method: BenchMethod,
    model: &FilterModel<f64>,
    ys: &[Mat<f64>],
) -> Result<Mat<f64>> {
    match method {
        BenchMethod::Backward => {
            let tape = run_filter(model, ys)?;
            Ok(backward(&tape, &NllLoss)?.dr_static)
        }
        BenchMethod::Sensitivity => full_gradient_forward(model, ys, &NllLoss, ParamTarget::R),
        BenchMethod::Fd => fd_full(model, ys, &NllLoss, ParamTarget::R, &FdConfig::default()),
    }
}

/// Median wall time (ms) and per-run multiply count of one full `R`-gradient
/// computation. Runs one untimed warmup plus `repetitions` timed runs.
pub fn time_r_gradient(
    method: BenchMethod,
    model: &FilterModel<f64>,
    ys: &[Mat<f64>],
    repetitions: usize,
) -> Result<(f64, u64)> {
    let reps = repetitions.max(1);
    counter::reset();
    std::hint::black_box(compute_r_gradient(method, model, ys)?);
    let multiplies = counter::multiplies();
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        std::hint::black_box(compute_r_gradient(method, model, ys)?);
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    Ok((times[times.len() / 2], multiplies))
}

/// Measure all `(dimension, method)` cells.
///
/// Each method is timed warm in its own consecutive repetition loop, the way
/// it would run inside a gradient-descent iteration.
pub fn run_benchmark(
    dims: &[usize],
    n_steps: usize,
    repetitions: usize,
    methods: &[BenchMethod],
    seed: u64,
) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &d in dims {
        let (model, ys) = bench_instance(d, n_steps, seed)?;
        for &method in methods {
            let (median_wall_ms, multiplies) =
                time_r_gradient(method, &model, &ys, repetitions)?;
            report.rows.push(BenchRow {
                method,
                d,
                m: d / 2,
                n_steps,
                repetitions: repetitions.max(1),
                median_wall_ms,
                multiplies,
            });
        }
    }
    Ok(report)
}
