//! Synthetic constant-velocity trajectories with noisy acceleration inputs
//! and noisy position measurements.
//!
//! The state stacks positions and velocities per axis, `x = (p, v)`; known
//! accelerations enter as inputs. With time step `dt` the dynamics are
//!
//! ```text
//! pₙ = pₙ₋₁ + dt·vₙ₋₁ + wₙᵖ
//! vₙ = vₙ₋₁ + dt·aₙ₋₁ + wₙᵛ        yₙ = pₙ + νₙ
//! ```
//!
//! `inputs[n]` holds the acceleration that advances the state into step `n`,
//! i.e. the one the filter model consumes as `uₙ` in its prediction; the
//! generated sequence is already shifted to that convention.
//!
//! Randomness comes from a seeded ChaCha8 stream (see [`RNG_NAME`]), so the
//! same configuration always reproduces the same trajectory, bit for bit.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::filter::{FilterModel, MatSeq};
use crate::mat::{Mat, SpdFactor};
use crate::{Error, Result, Scalar};

/// Name of the random number generator used by the simulator.
pub const RNG_NAME: &str = "chacha8";

/// Default seed used when none is given (overridable via the CLI and its
/// seed environment variable).
pub const DEFAULT_SEED: u64 = 7;

/// Acceleration profile driving the simulated trajectory.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputProfile<F> {
    Zero,
    /// Same acceleration vector at every step.
    Constant { value: Vec<F> },
    /// `uₙ[axis] = amplitude · sin(angular_freq·n + axis·2π/3)`.
    Sinusoidal { amplitude: F, angular_freq: F },
    /// Explicit per-step accelerations.
    Supplied { values: Vec<Vec<F>> },
}

impl<F: Scalar> InputProfile<F> {
    fn at(&self, step: usize, axes: usize) -> Result<Mat<F>> {
        match self {
            InputProfile::Zero => Ok(Mat::zeros(axes, 1)),
            InputProfile::Constant { value } => Mat::vec(value),
            InputProfile::Sinusoidal {
                amplitude,
                angular_freq,
            } => {
                let phase_step = F::from_f64_lossy(std::f64::consts::TAU / 3.0);
                let n = F::from_usize(step).expect("step fits scalar");
                Ok(Mat::from_fn(axes, 1, |axis, _| {
                    let phase = phase_step * F::from_usize(axis).expect("axis fits scalar");
                    *amplitude * (*angular_freq * n + phase).sin()
                }))
            }
            InputProfile::Supplied { values } => Mat::vec(&values[step]),
        }
    }
}

/// Simulation configuration. `axes` position/velocity pairs give a state of
/// dimension `2·axes` and measurements of dimension `axes`.
#[derive(Clone, Debug, Serialize)]
pub struct SimConfig<F> {
    pub n_steps: usize,
    pub dt: F,
    pub axes: usize,
    pub q_true: Mat<F>,
    pub r_true: Mat<F>,
    pub x0_true: Mat<F>,
    pub p0: Mat<F>,
    pub input_profile: InputProfile<F>,
    pub seed: u64,
    pub rng: &'static str,
}

impl<F: Scalar> Default for SimConfig<F> {
    fn default() -> Self {
        SimConfig::for_axes(3)
    }
}

impl<F: Scalar> SimConfig<F> {
    /// Defaults for a given number of axes: 1440 steps at `dt = 1`, process
    /// noise `diag(0.01·I, 0.04·I)`, a correlated measurement covariance
    /// built from [`default_r_factor`], sinusoidal accelerations.
    pub fn for_axes(axes: usize) -> Self {
        let c = F::from_f64_lossy;
        let d = 2 * axes;
        let mut q_diag = vec![c(0.01); axes];
        q_diag.extend(vec![c(0.04); axes]);
        let l = default_r_factor::<F>(axes);
        let r_true = (&l * &l.transpose()).symmetrize().expect("square");
        let x0 = Mat::from_fn(d, 1, |i, _| {
            if i < axes {
                F::zero()
            } else {
                let k = i - axes;
                let sign = if k % 2 == 0 { F::one() } else { -F::one() };
                sign * c(1.0) / F::from_usize(k + 1).expect("axis count")
            }
        });
        SimConfig {
            n_steps: 1440,
            dt: F::one(),
            axes,
            q_true: Mat::diag(&q_diag),
            r_true,
            x0_true: x0,
            p0: Mat::identity(d),
            input_profile: InputProfile::Sinusoidal {
                amplitude: c(0.2),
                angular_freq: c(0.05),
            },
            seed: DEFAULT_SEED,
            rng: RNG_NAME,
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.axes
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        let m = self.axes;
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be positive".into()));
        }
        if !(self.dt > F::zero()) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        let square = |mat: &Mat<F>, n: usize, name: &str| -> Result<()> {
            if mat.rows() != n || mat.cols() != n {
                return Err(Error::DimMismatch(format!("{name} must be {n}x{n}")));
            }
            Ok(())
        };
        square(&self.q_true, d, "Q_true")?;
        square(&self.r_true, m, "R_true")?;
        square(&self.p0, d, "P0")?;
        if self.x0_true.rows() != d || self.x0_true.cols() != 1 {
            return Err(Error::DimMismatch(format!("x0_true must be a {d}-vector")));
        }
        if let InputProfile::Supplied { values } = &self.input_profile {
            if values.len() < self.n_steps {
                return Err(Error::DimMismatch(format!(
                    "supplied inputs cover {} of {} steps",
                    values.len(),
                    self.n_steps
                )));
            }
            if values.iter().any(|v| v.len() != m) {
                return Err(Error::DimMismatch(format!("inputs must have {m} entries")));
            }
        }
        if let InputProfile::Constant { value } = &self.input_profile {
            if value.len() != m {
                return Err(Error::DimMismatch(format!("inputs must have {m} entries")));
            }
        }
        Ok(())
    }
}

/// Deterministic lower-triangular factor giving the default correlated
/// measurement covariance for a given axis count.
pub fn default_r_factor<F: Scalar>(axes: usize) -> Mat<F> {
    let c = F::from_f64_lossy;
    Mat::from_fn(axes, axes, |i, j| {
        if i == j {
            c(4.5 + 0.5 * i as f64)
        } else if j < i {
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            c(sign * 0.8 / (1.0 + (i - j) as f64))
        } else {
            F::zero()
        }
    })
}

/// A simulated run: true states, the acceleration inputs that produced them,
/// and the noisy position measurements, all of length `n_steps`.
#[derive(Clone, Debug)]
pub struct Trajectory<F> {
    pub true_states: Vec<Mat<F>>,
    pub inputs: Vec<Mat<F>>,
    pub measurements: Vec<Mat<F>>,
}

fn noise_factor<F: Scalar>(cov: &Mat<F>, name: &str) -> Result<Option<SpdFactor<F>>> {
    if cov.max_abs() == F::zero() {
        return Ok(None);
    }
    cov.cholesky().map(Some).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => Error::NotPositiveSemiDefinite { param: name.into() },
        other => other,
    })
}

fn draw<F: Scalar, R: Rng>(rng: &mut R, factor: &Option<SpdFactor<F>>, dim: usize) -> Mat<F>
where
    StandardNormal: Distribution<F>,
{
    match factor {
        None => Mat::zeros(dim, 1),
        Some(f) => {
            let xi = Mat::from_fn(dim, 1, |_, _| rng.sample(StandardNormal));
            f.lower().mul(&xi).expect("factor dims")
        }
    }
}

/// The block matrices of the constant-velocity model:
/// `F = [[I, dt·I], [0, I]]`, `B = [[0], [dt·I]]`, `H = [I, 0]`.
pub fn const_velocity_matrices<F: Scalar>(axes: usize, dt: F) -> (Mat<F>, Mat<F>, Mat<F>) {
    let d = 2 * axes;
    let mut f = Mat::identity(d);
    for i in 0..axes {
        f[(i, axes + i)] = dt;
    }
    let mut b = Mat::zeros(d, axes);
    for i in 0..axes {
        b[(axes + i, i)] = dt;
    }
    let mut h = Mat::zeros(axes, d);
    for i in 0..axes {
        h[(i, i)] = F::one();
    }
    (f, b, h)
}

/// Draw one trajectory from the configured model.
pub fn simulate<F: Scalar>(cfg: &SimConfig<F>) -> Result<Trajectory<F>>
where
    StandardNormal: Distribution<F>,
{
    cfg.validate()?;
    let axes = cfg.axes;
    let d = cfg.state_dim();
    let (f, b, h) = const_velocity_matrices(axes, cfg.dt);
    let lq = noise_factor(&cfg.q_true, "Q_true")?;
    let lr = noise_factor(&cfg.r_true, "R_true")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x = cfg.x0_true.clone();
    let mut traj = Trajectory {
        true_states: Vec::with_capacity(cfg.n_steps),
        inputs: Vec::with_capacity(cfg.n_steps),
        measurements: Vec::with_capacity(cfg.n_steps),
    };
    for n in 0..cfg.n_steps {
        let u = cfg.input_profile.at(n, axes)?;
        let w = draw(&mut rng, &lq, d);
        x = f.mul(&x)?.add(&b.mul(&u)?)?.add(&w)?;
        let nu = draw(&mut rng, &lr, axes);
        let y = h.mul(&x)?.add(&nu)?;
        traj.true_states.push(x.clone());
        traj.inputs.push(u);
        traj.measurements.push(y);
    }
    Ok(traj)
}

/// Filter model matching the simulator's dynamics: the §-block constant-
/// velocity `F`, `B`, `H`, the configured (known) `Q` and `P0`, and the
/// caller's measurement-noise guess. `inputs` are the trajectory's
/// accelerations, consumed as `uₙ` by the filter's prediction.
pub fn model_from_sim<F: Scalar>(
    cfg: &SimConfig<F>,
    r_guess: Mat<F>,
    inputs: Vec<Mat<F>>,
) -> Result<FilterModel<F>> {
    cfg.validate()?;
    let (f, b, h) = const_velocity_matrices(cfg.axes, cfg.dt);
    let model = FilterModel {
        f: f.into(),
        b: Some(b.into()),
        h: h.into(),
        q: MatSeq::Static(cfg.q_true.clone()),
        r: MatSeq::Static(r_guess),
        p0: cfg.p0.clone(),
        x0: cfg.x0_true.clone(),
        u: Some(inputs),
    };
    model.validate(0)?;
    Ok(model)
}

/// Simulate measurements (and true states) from an arbitrary linear-Gaussian
/// model, for tests and fixtures.
pub fn simulate_model<F: Scalar>(
    model: &FilterModel<F>,
    n_steps: usize,
    seed: u64,
) -> Result<(Vec<Mat<F>>, Vec<Mat<F>>)>
where
    StandardNormal: Distribution<F>,
{
    model.validate(n_steps)?;
    let d = model.state_dim();
    let m = model.meas_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = model.x0.clone();
    let mut states = Vec::with_capacity(n_steps);
    let mut ys = Vec::with_capacity(n_steps);
    for n in 0..n_steps {
        let q = noise_factor(model.q.at(n), "Q")?;
        let r = noise_factor(model.r.at(n), "R")?;
        x = model.f.at(n).mul(&x)?;
        if let (Some(b), Some(u)) = (&model.b, &model.u) {
            x = x.add(&b.at(n).mul(&u[n])?)?;
        }
        x = x.add(&draw(&mut rng, &q, d))?;
        let y = model.h.at(n).mul(&x)?.add(&draw(&mut rng, &r, m))?;
        states.push(x.clone());
        ys.push(y);
    }
    Ok((states, ys))
}

/// Write the trajectory as CSV: header `t,y1..,u1..,x1..`, one row per step.
pub fn write_trajectory_csv<F: Scalar>(traj: &Trajectory<F>, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let m = traj.measurements.first().map_or(0, Mat::rows);
    let p = traj.inputs.first().map_or(0, Mat::rows);
    let d = traj.true_states.first().map_or(0, Mat::rows);
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("y{i}")));
    header.extend((1..=p).map(|i| format!("u{i}")));
    header.extend((1..=d).map(|i| format!("x{i}")));
    writeln!(out, "{}", header.join(","))?;
    for n in 0..traj.measurements.len() {
        let mut row = vec![format!("{}", n + 1)];
        row.extend((0..m).map(|i| format!("{}", traj.measurements[n][i])));
        row.extend((0..p).map(|i| format!("{}", traj.inputs[n][i])));
        row.extend((0..d).map(|i| format!("{}", traj.true_states[n][i])));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Write the configuration sidecar (JSON), recording the RNG name and seed
/// next to every model matrix so a run can be reproduced exactly.
pub fn write_metadata_json<F: Scalar + Serialize>(cfg: &SimConfig<F>, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::InvalidArgument(format!("serialize metadata: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::run_filter;

    type M = Mat<f64>;

    #[test]
    fn noiseless_straight_line() {
        let mut cfg = SimConfig::<f64>::for_axes(3);
        cfg.n_steps = 10;
        cfg.q_true = M::zeros(6, 6);
        cfg.r_true = M::identity(3).scale(1e-12);
        cfg.input_profile = InputProfile::Zero;
        cfg.x0_true = M::vec(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let traj = simulate(&cfg).unwrap();
        for (n, state) in traj.true_states.iter().enumerate() {
            assert!((state[0] - (n + 1) as f64).abs() < 1e-12, "p_x at step {n}");
            assert!(state[1].abs() < 1e-12);
            assert!((state[3] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = SimConfig::<f64>::for_axes(2);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        for (x, y) in a.measurements.iter().zip(&b.measurements) {
            assert!(x == y);
        }
        for (x, y) in a.true_states.iter().zip(&b.true_states) {
            assert!(x == y);
        }
    }

    #[test]
    fn measurement_noise_sample_covariance_near_r_true() {
        let cfg = SimConfig::<f64>::default();
        let traj = simulate(&cfg).unwrap();
        let n = cfg.n_steps;
        // Residuals y - p are exactly the measurement noise draws.
        let mut cov = M::zeros(3, 3);
        for k in 0..n {
            let nu = M::from_fn(3, 1, |i, _| traj.measurements[k][i] - traj.true_states[k][i]);
            cov = cov.add(&nu.mul(&nu.transpose()).unwrap()).unwrap();
        }
        cov = cov.scale(1.0 / n as f64);
        let rel = (&cov - &cfg.r_true).norm_fro() / cfg.r_true.norm_fro();
        assert!(rel < 0.15, "sample covariance off by {rel:.3}");
    }

    #[test]
    fn model_from_sim_shapes_and_h_extracts_position() {
        let cfg = SimConfig::<f64>::for_axes(3);
        let (f, _, h) = const_velocity_matrices(3, 1.0);
        for i in 0..3 {
            assert_eq!(f[(i, 3 + i)], 1.0);
        }
        let x = M::vec(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let pos = h.mul(&x).unwrap();
        assert_eq!(pos.as_slice(), &[1.0, 2.0, 3.0]);
        let traj = simulate(&cfg).unwrap();
        let model = model_from_sim(&cfg, cfg.r_true.clone(), traj.inputs.clone()).unwrap();
        assert_eq!(model.state_dim(), 6);
        assert_eq!(model.meas_dim(), 3);
        assert_eq!(model.input_dim(), 3);
    }

    #[test]
    fn filter_at_true_parameters_has_white_innovations() {
        let cfg = SimConfig::<f64>::default();
        let traj = simulate(&cfg).unwrap();
        let model = model_from_sim(&cfg, cfg.r_true.clone(), traj.inputs.clone()).unwrap();
        let tape = run_filter(&model, &traj.measurements).unwrap();
        // Mean Mahalanobis statistic of the innovations should sit near the
        // measurement dimension (chi-square mean), and the innovation mean
        // near zero relative to its spread.
        let n = tape.len() as f64;
        let mut maha = 0.0;
        let mut mean_z = M::zeros(3, 1);
        for rec in &tape.steps {
            maha += rec.z.frob_dot(&rec.sinv_z).unwrap();
            mean_z = mean_z.add(&rec.z).unwrap();
        }
        maha /= n;
        mean_z = mean_z.scale(1.0 / n);
        assert!(
            (maha - 3.0).abs() < 0.5,
            "mean Mahalanobis {maha} should be near 3"
        );
        let typical_sigma = (cfg.r_true[(0, 0)] / n).sqrt();
        assert!(mean_z.max_abs() < 6.0 * typical_sigma, "innovation mean biased");
    }

    #[test]
    fn trajectory_csv_layout() {
        let mut cfg = SimConfig::<f64>::for_axes(1);
        cfg.n_steps = 3;
        let traj = simulate(&cfg).unwrap();
        let dir = std::env::temp_dir().join("kfgrad_sim_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        write_trajectory_csv(&traj, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,y1,u1,x1,x2");
        assert_eq!(lines.count(), 3);
        std::fs::remove_dir_all(&dir).ok();
    }
}
