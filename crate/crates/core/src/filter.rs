//! Forward Kalman filter over a measurement sequence, recording a tape.
//!
//! The recursion alternates a prediction with a measurement update:
//!
//! ```text
//! x⁻ₙ = Fₙ x⁺ₙ₋₁ + Bₙ uₙ          P⁻ₙ = Fₙ P⁺ₙ₋₁ Fₙᵀ + Qₙ
//! zₙ = yₙ − Hₙ x⁻ₙ                Sₙ = Hₙ P⁻ₙ Hₙᵀ + Rₙ
//! Kₙ = P⁻ₙ Hₙᵀ Sₙ⁻¹               x⁺ₙ = x⁻ₙ + Kₙ zₙ
//! P⁺ₙ = (I − Kₙ Hₙ) P⁻ₙ
//! ```
//!
//! seeded by the posterior `(x0, P0)` at step 0. Gains are obtained by
//! solving against the Cholesky factor of `Sₙ`, never through an explicit
//! inverse, and every covariance is re-symmetrized after update. Each
//! [`StepRecord`] keeps the factor, `Sₙ⁻¹zₙ` and `I − KₙHₙ` so the backward
//! pass runs on matrix products alone, without factorizing anything.
//!
//! Step indices are 0-based throughout the crate: step `n` consumes
//! measurement `ys[n]` and, when inputs are present, `u[n]`.

use crate::mat::{matmul_tb_into, matvec_affine_into, Mat, SpdFactor};
use crate::{Error, Result, Scalar};

/// A model parameter that is either shared by all steps or given per step.
#[derive(Clone, Debug)]
pub enum MatSeq<F> {
    Static(Mat<F>),
    PerStep(Vec<Mat<F>>),
}

impl<F: Scalar> MatSeq<F> {
    pub fn at(&self, step: usize) -> &Mat<F> {
        match self {
            MatSeq::Static(m) => m,
            MatSeq::PerStep(v) => &v[step],
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, MatSeq::Static(_))
    }

    /// The static matrix, if this parameter is static.
    pub fn as_static(&self) -> Option<&Mat<F>> {
        match self {
            MatSeq::Static(m) => Some(m),
            MatSeq::PerStep(_) => None,
        }
    }

    /// Materialize a per-step copy of length `n`, e.g. for per-step
    /// perturbations of an otherwise static parameter.
    pub fn to_per_step(&self, n: usize) -> Vec<Mat<F>> {
        match self {
            MatSeq::Static(m) => vec![m.clone(); n],
            MatSeq::PerStep(v) => v.clone(),
        }
    }

    fn check(&self, rows: usize, cols: usize, n_steps: usize, name: &str) -> Result<()> {
        let dims_ok = |m: &Mat<F>| m.rows() == rows && m.cols() == cols;
        match self {
            MatSeq::Static(m) => {
                if !dims_ok(m) {
                    return Err(Error::DimMismatch(format!(
                        "{name} must be {rows}x{cols}, got {}x{}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
            MatSeq::PerStep(v) => {
                if v.len() != n_steps {
                    return Err(Error::DimMismatch(format!(
                        "per-step {name} has {} entries for {n_steps} steps",
                        v.len()
                    )));
                }
                if let Some(m) = v.iter().find(|m| !dims_ok(m)) {
                    return Err(Error::DimMismatch(format!(
                        "per-step {name} must be {rows}x{cols}, got {}x{}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        Ok(())
    }
}

impl<F: Scalar> From<Mat<F>> for MatSeq<F> {
    fn from(m: Mat<F>) -> Self {
        MatSeq::Static(m)
    }
}

/// Complete description of a linear-Gaussian state-space model.
///
/// Fields are public so tests and tools can build variants freely;
/// [`FilterModel::validate`] runs before every filter pass.
#[derive(Clone, Debug)]
pub struct FilterModel<F> {
    /// State transition `Fₙ` (d x d).
    pub f: MatSeq<F>,
    /// Optional input map `Bₙ` (d x p), applied as `Bₙ uₙ` in the prediction.
    pub b: Option<MatSeq<F>>,
    /// Observation map `Hₙ` (m x d).
    pub h: MatSeq<F>,
    /// Process noise covariance `Qₙ` (d x d, symmetric PSD).
    pub q: MatSeq<F>,
    /// Measurement noise covariance `Rₙ` (m x m, symmetric PD at runtime).
    pub r: MatSeq<F>,
    /// Initial covariance `P₀` (d x d, symmetric PSD).
    pub p0: Mat<F>,
    /// Initial state mean `x₀` (d-vector).
    pub x0: Mat<F>,
    /// Optional input sequence, one p-vector per step.
    pub u: Option<Vec<Mat<F>>>,
}

impl<F: Scalar> FilterModel<F> {
    /// Time-invariant model without inputs.
    pub fn time_invariant(
        f: Mat<F>,
        h: Mat<F>,
        q: Mat<F>,
        r: Mat<F>,
        p0: Mat<F>,
        x0: Mat<F>,
    ) -> Result<Self> {
        let model = FilterModel {
            f: f.into(),
            b: None,
            h: h.into(),
            q: q.into(),
            r: r.into(),
            p0,
            x0,
            u: None,
        };
        model.validate(0)?;
        Ok(model)
    }

    /// Attach an input map and input sequence.
    pub fn with_input(mut self, b: Mat<F>, u: Vec<Mat<F>>) -> Result<Self> {
        self.b = Some(b.into());
        self.u = Some(u);
        self.validate(self.u.as_ref().map_or(0, Vec::len))?;
        Ok(self)
    }

    /// State dimension `d`.
    pub fn state_dim(&self) -> usize {
        self.x0.rows()
    }

    /// Measurement dimension `m`.
    pub fn meas_dim(&self) -> usize {
        self.h.at(0).rows()
    }

    /// Input dimension `p` (0 when no input map is present).
    pub fn input_dim(&self) -> usize {
        self.b.as_ref().map_or(0, |b| b.at(0).cols())
    }

    /// Check all shapes and symmetry invariants for an `n_steps`-long run.
    pub fn validate(&self, n_steps: usize) -> Result<()> {
        let d = self.state_dim();
        if self.x0.cols() != 1 {
            return Err(Error::DimMismatch("x0 must be a column vector".into()));
        }
        let m = self.meas_dim();
        self.f.check(d, d, n_steps, "F")?;
        self.h.check(m, d, n_steps, "H")?;
        self.q.check(d, d, n_steps, "Q")?;
        self.r.check(m, m, n_steps, "R")?;
        if self.p0.rows() != d || self.p0.cols() != d {
            return Err(Error::DimMismatch(format!(
                "P0 must be {d}x{d}, got {}x{}",
                self.p0.rows(),
                self.p0.cols()
            )));
        }
        let tol = F::symmetry_tol();
        let psd_slack = F::from_f64_lossy(1e-10);
        for (name, seq) in [("Q", &self.q), ("R", &self.r)] {
            let each = seq.to_per_step(if seq.is_static() { 1 } else { n_steps });
            for mat in &each {
                if !mat.is_symmetric_within(tol) {
                    return Err(Error::NotSymmetric(format!("{name} must be symmetric")));
                }
                if !psd_within(mat, psd_slack) {
                    return Err(Error::NotPositiveSemiDefinite { param: name.into() });
                }
            }
        }
        if !self.p0.is_symmetric_within(tol) {
            return Err(Error::NotSymmetric("P0 must be symmetric".into()));
        }
        if !psd_within(&self.p0, psd_slack) {
            return Err(Error::NotPositiveSemiDefinite { param: "P0".into() });
        }
        match (&self.b, &self.u) {
            (None, None) => {}
            (Some(b), Some(u)) => {
                let p = b.at(0).cols();
                b.check(d, p, n_steps, "B")?;
                if u.len() < n_steps {
                    return Err(Error::DimMismatch(format!(
                        "input sequence has {} entries for {n_steps} steps",
                        u.len()
                    )));
                }
                if u.iter().any(|v| v.rows() != p || v.cols() != 1) {
                    return Err(Error::DimMismatch(format!("inputs must be {p}-vectors")));
                }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "input map B and input sequence u must be given together".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Everything the losses and the backward pass need from one filter step.
#[derive(Clone, Debug)]
pub struct StepRecord<F> {
    /// Predicted state `x̂ₙ|ₙ₋₁`.
    pub x_prior: Mat<F>,
    /// Updated state `x̂ₙ|ₙ`.
    pub x_post: Mat<F>,
    /// Predicted covariance `Pₙ|ₙ₋₁`.
    pub p_prior: Mat<F>,
    /// Updated covariance `Pₙ|ₙ`.
    pub p_post: Mat<F>,
    /// Kalman gain `Kₙ`.
    pub k: Mat<F>,
    /// Innovation `zₙ = yₙ − Hₙ x̂ₙ|ₙ₋₁`.
    pub z: Mat<F>,
    /// Cholesky factor of the innovation covariance `Sₙ`.
    pub s_factor: SpdFactor<F>,
    /// `Sₙ⁻¹ zₙ`.
    pub sinv_z: Mat<F>,
    /// `I − Kₙ Hₙ`.
    pub ikh: Mat<F>,
    /// The measurement `yₙ`.
    pub y: Mat<F>,
}

/// Ordered record of a complete filter pass.
#[derive(Debug)]
pub struct FilterTape<'a, F> {
    pub model: &'a FilterModel<F>,
    pub steps: Vec<StepRecord<F>>,
}

impl<F: Scalar> FilterTape<'_, F> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One prediction: `(x⁺ₙ₋₁, P⁺ₙ₋₁) → (x⁻ₙ, P⁻ₙ)` for 0-based step `n`.
pub fn predict<F: Scalar>(
    x_post_prev: &Mat<F>,
    p_post_prev: &Mat<F>,
    model: &FilterModel<F>,
    step: usize,
) -> Result<(Mat<F>, Mat<F>)> {
    let f = model.f.at(step);
    let mut x_prior = f.mul(x_post_prev)?;
    if let (Some(b), Some(u)) = (&model.b, &model.u) {
        x_prior.add_assign_mat(&b.at(step).mul(&u[step])?);
    }
    // P⁻ = F P⁺ Fᵀ + Q, re-symmetrized.
    let fp = f.mul(p_post_prev)?;
    let mut p_prior = Mat::zeros(fp.rows(), f.rows());
    matmul_tb_into(&fp, f, &mut p_prior);
    p_prior.add_assign_mat(model.q.at(step));
    p_prior.symmetrize_in_place();
    Ok((x_prior, p_prior))
}

/// One measurement update, producing the full step record. The prior state
/// and covariance are taken by value; they live on in the record.
pub fn update<F: Scalar>(
    x_prior: Mat<F>,
    p_prior: Mat<F>,
    y: &Mat<F>,
    model: &FilterModel<F>,
    step: usize,
) -> Result<StepRecord<F>> {
    let h = model.h.at(step);
    let d = model.state_dim();
    if y.rows() != h.rows() || y.cols() != 1 {
        return Err(Error::DimMismatch(format!(
            "measurement at step {step} must be a {}-vector",
            h.rows()
        )));
    }
    // z = y − H x⁻
    let mut z = Mat::zeros(h.rows(), 1);
    matvec_affine_into(y, -F::one(), h, &x_prior, &mut z);
    let mut hp = h.mul(&p_prior)?;
    // S = H P⁻ Hᵀ + R, re-symmetrized.
    let m = h.rows();
    let mut s = Mat::zeros(m, m);
    matmul_tb_into(&hp, h, &mut s);
    s.add_assign_mat(model.r.at(step));
    s.symmetrize_in_place();
    let s_factor = s.cholesky().map_err(|e| e.at_step(step))?;
    // K = P⁻Hᵀ S⁻¹, via Kᵀ = S⁻¹ (H P⁻) since P⁻ is symmetric; H P⁻ is not
    // needed afterwards, so it is solved in place.
    s_factor.solve_in_place(&mut hp)?;
    let k = hp.transpose();
    // x⁺ = x⁻ + K z
    let mut x_post = Mat::zeros(d, 1);
    matvec_affine_into(&x_prior, F::one(), &k, &z, &mut x_post);
    let kh = k.mul(h)?;
    let ikh = Mat::from_fn(d, d, |i, j| {
        if i == j {
            F::one() - kh[(i, j)]
        } else {
            -kh[(i, j)]
        }
    });
    let mut p_post = ikh.mul(&p_prior)?;
    p_post.symmetrize_in_place();
    let sinv_z = s_factor.solve(&z)?;
    Ok(StepRecord {
        x_prior,
        x_post,
        p_prior,
        p_post,
        k,
        z,
        s_factor,
        sinv_z,
        ikh,
        y: y.clone(),
    })
}

/// Run the filter over the whole measurement sequence.
pub fn run_filter<'a, F: Scalar>(
    model: &'a FilterModel<F>,
    ys: &[Mat<F>],
) -> Result<FilterTape<'a, F>> {
    if ys.is_empty() {
        return Err(Error::InvalidArgument("measurement sequence is empty".into()));
    }
    model.validate(ys.len())?;
    let mut steps = Vec::with_capacity(ys.len());
    let mut x = model.x0.clone();
    let mut p = model.p0.clone();
    for (n, y) in ys.iter().enumerate() {
        let (x_prior, p_prior) = predict(&x, &p, model, n)?;
        let rec = update(x_prior, p_prior, y, model, n)?;
        x = rec.x_post.clone();
        p = rec.p_post.clone();
        steps.push(rec);
    }
    Ok(FilterTape { model, steps })
}

/// Worst-step relative errors of the algebraic identities a correct tape obeys.
///
/// Checked: `Sₙ⁻¹ = Rₙ⁻¹(I − HₙKₙ)`, the information form
/// `(Pₙ|ₙ)⁻¹ = (Pₙ|ₙ₋₁)⁻¹ + HₙᵀRₙ⁻¹Hₙ`, the alternate gain
/// `Kₙ = Pₙ|ₙHₙᵀRₙ⁻¹`, that `(I−KₙHₙ)Pₙ|ₙ₋₁` reproduces `Pₙ|ₙ`, and that
/// every covariance stays symmetric positive semi-definite.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityReport<F> {
    pub woodbury: F,
    pub information_form: F,
    pub alternate_gain: F,
    pub posterior_consistency: F,
    pub covariances_psd: bool,
}

fn rel_fro<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> F {
    let denom = a.norm_fro().max(b.norm_fro()).max(F::one());
    a.sub(b).map(|d| d.norm_fro() / denom).unwrap_or(F::infinity())
}

/// Semi-definiteness within slack: `A + slack·I` admits a Cholesky factor.
fn psd_within<F: Scalar>(a: &Mat<F>, rel_slack: F) -> bool {
    let shift = rel_slack * a.max_abs().max(F::one());
    let mut shifted = a.clone();
    for i in 0..a.rows() {
        shifted[(i, i)] = shifted[(i, i)] + shift;
    }
    shifted.cholesky().is_ok()
}

/// Evaluate the identity residuals over every step of a tape.
pub fn check_identities<F: Scalar>(tape: &FilterTape<'_, F>) -> Result<IdentityReport<F>> {
    let mut rep = IdentityReport::<F> {
        covariances_psd: true,
        ..Default::default()
    };
    let psd_slack = F::from_f64_lossy(1e-10);
    for (n, rec) in tape.steps.iter().enumerate() {
        let h = tape.model.h.at(n);
        let r_inv = tape.model.r.at(n).cholesky()?.inverse();
        let s_inv = rec.s_factor.inverse();

        let woodbury = r_inv.mul(&Mat::identity(h.rows()).sub(&h.mul(&rec.k)?)?)?;
        rep.woodbury = rep.woodbury.max(rel_fro(&s_inv, &woodbury));

        let p_post_inv = rec.p_post.cholesky().map_err(|e| e.at_step(n))?.inverse();
        let p_prior_inv = rec.p_prior.cholesky().map_err(|e| e.at_step(n))?.inverse();
        let info = p_prior_inv.add(&h.transpose().mul(&r_inv)?.mul(h)?)?;
        rep.information_form = rep.information_form.max(rel_fro(&p_post_inv, &info));

        let alt_gain = rec.p_post.mul(&h.transpose())?.mul(&r_inv)?;
        rep.alternate_gain = rep.alternate_gain.max(rel_fro(&rec.k, &alt_gain));

        let via_ikh = rec.ikh.mul(&rec.p_prior)?;
        rep.posterior_consistency = rep
            .posterior_consistency
            .max(rel_fro(&rec.p_post, &via_ikh));

        rep.covariances_psd = rep.covariances_psd
            && psd_within(&rec.p_prior, psd_slack)
            && psd_within(&rec.p_post, psd_slack);
    }
    Ok(rep)
}
