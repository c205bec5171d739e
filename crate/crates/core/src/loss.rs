//! Per-step scalar losses and their closed-form local gradients.
//!
//! A loss is a sum over steps of a prior term `lₙ|ₙ₋₁(x̂ₙ|ₙ₋₁, Pₙ|ₙ₋₁, Rₙ, yₙ)`
//! and a posterior term `lₙ|ₙ(x̂ₙ|ₙ, Pₙ|ₙ)`. Implementations return the two
//! term values together with all local partial derivatives in one call, so
//! the innovation factor stored on the tape is reused instead of being
//! refactorized.
//!
//! Gradient conventions: gradients w.r.t. vectors are plain gradients;
//! gradients w.r.t. symmetric matrix arguments are symmetric-part gradients
//! (symmetrized at the source), matching the symmetric-pair perturbation
//! convention used by the finite-difference oracle.

use crate::filter::{FilterTape, StepRecord};
use crate::mat::Mat;
use crate::{Error, Result, Scalar};

/// Local gradients of one step's loss terms w.r.t. their arguments.
#[derive(Clone, Debug)]
pub struct LossLocalGrads<F> {
    /// `∂lₙ|ₙ₋₁/∂x̂ₙ|ₙ₋₁` (d-vector).
    pub dl_xprior: Mat<F>,
    /// `∂lₙ|ₙ₋₁/∂Pₙ|ₙ₋₁` (d x d, symmetric).
    pub dl_pprior: Mat<F>,
    /// `∂lₙ|ₙ₋₁/∂Rₙ` (m x m, symmetric).
    pub dl_r: Mat<F>,
    /// `∂lₙ|ₙ₋₁/∂yₙ` (m-vector).
    pub dl_y: Mat<F>,
    /// `∂lₙ|ₙ/∂x̂ₙ|ₙ` (d-vector).
    pub dl_xpost: Mat<F>,
    /// `∂lₙ|ₙ/∂Pₙ|ₙ` (d x d, symmetric).
    pub dl_ppost: Mat<F>,
}

impl<F: Scalar> LossLocalGrads<F> {
    pub fn zeros(d: usize, m: usize) -> Self {
        LossLocalGrads {
            dl_xprior: Mat::zeros(d, 1),
            dl_pprior: Mat::zeros(d, d),
            dl_r: Mat::zeros(m, m),
            dl_y: Mat::zeros(m, 1),
            dl_xpost: Mat::zeros(d, 1),
            dl_ppost: Mat::zeros(d, d),
        }
    }
}

/// A per-step loss: values of the two terms plus their local gradients.
pub trait LossSpec<F: Scalar> {
    /// `(lₙ|ₙ₋₁, lₙ|ₙ)` for 0-based step `n`.
    fn step_values(&self, step: usize, rec: &StepRecord<F>, h: &Mat<F>) -> (F, F);

    /// `(lₙ|ₙ₋₁, lₙ|ₙ, local gradients)` for 0-based step `n`.
    fn step_terms(&self, step: usize, rec: &StepRecord<F>, h: &Mat<F>)
        -> (F, F, LossLocalGrads<F>);

    /// Check the spec is usable with this tape (lengths, dimensions).
    fn validate(&self, _tape: &FilterTape<'_, F>) -> Result<()> {
        Ok(())
    }
}

/// Sum of all per-step terms over the tape.
pub fn total_loss<F: Scalar, L: LossSpec<F> + ?Sized>(
    tape: &FilterTape<'_, F>,
    spec: &L,
) -> Result<F> {
    if tape.is_empty() {
        return Err(Error::InvalidArgument("tape is empty".into()));
    }
    spec.validate(tape)?;
    let mut total = F::zero();
    for (n, rec) in tape.steps.iter().enumerate() {
        let (l_prior, l_post) = spec.step_values(n, rec, tape.model.h.at(n));
        total += l_prior + l_post;
    }
    Ok(total)
}

/// Innovation negative log-likelihood (energy) term for one step:
/// `lₙ|ₙ₋₁ = log det Sₙ + zₙᵀSₙ⁻¹zₙ`, `lₙ|ₙ = 0`, with closed-form local
/// gradients. The `(Nm/2)·log 2π` normalization is omitted; it does not
/// depend on any tuning parameter.
pub fn nll_step<F: Scalar>(rec: &StepRecord<F>, h: &Mat<F>) -> (F, F, LossLocalGrads<F>) {
    let d = h.cols();
    let m = h.rows();
    let two = F::from_f64_lossy(2.0);

    let l_prior = rec.s_factor.logdet() + rec.z.frob_dot(&rec.sinv_z).expect("z dims");

    // Standalone S⁻¹ is an output term here; everything else reuses Sₙ⁻¹zₙ.
    let s_inv = rec.s_factor.inverse();
    let sz = &rec.sinv_z;

    let mut dl_xprior = Mat::zeros(d, 1);
    crate::mat::matmul_ta_into(h, sz, &mut dl_xprior);
    dl_xprior.scale_assign(-two);
    let mut dl_r = Mat::from_fn(m, m, |i, j| s_inv[(i, j)] - sz[i] * sz[j]);
    crate::counter::add_multiplies((m * m) as u64);
    dl_r.symmetrize_in_place();
    // ∂l/∂P⁻ = Hᵀ (∂l/∂R) H: differentiating w.r.t. HP⁻Hᵀ gives the same
    // inner expression as w.r.t. R.
    let mut t = Mat::zeros(d, m);
    crate::mat::matmul_ta_into(h, &dl_r, &mut t);
    let mut dl_pprior = t.mul(h).expect("d x d");
    dl_pprior.symmetrize_in_place();
    let grads = LossLocalGrads {
        dl_xprior,
        dl_pprior,
        dl_r,
        dl_y: sz.scale(two),
        dl_xpost: Mat::zeros(d, 1),
        dl_ppost: Mat::zeros(d, d),
    };
    (l_prior, F::zero(), grads)
}

/// Innovation NLL loss over the whole trajectory.
#[derive(Clone, Copy, Debug, Default)]
pub struct NllLoss;

impl<F: Scalar> LossSpec<F> for NllLoss {
    fn step_values(&self, _step: usize, rec: &StepRecord<F>, _h: &Mat<F>) -> (F, F) {
        let l_prior = rec.s_factor.logdet() + rec.z.frob_dot(&rec.sinv_z).expect("z dims");
        (l_prior, F::zero())
    }

    fn step_terms(
        &self,
        _step: usize,
        rec: &StepRecord<F>,
        h: &Mat<F>,
    ) -> (F, F, LossLocalGrads<F>) {
        nll_step(rec, h)
    }
}

/// Weighted squared error of the posterior state against ground truth:
/// `lₙ|ₙ = (x̂ₙ|ₙ − xₙ)ᵀ W (x̂ₙ|ₙ − xₙ)`, `lₙ|ₙ₋₁ = 0`.
pub fn mse_step<F: Scalar>(
    rec: &StepRecord<F>,
    truth_state: &Mat<F>,
    weight: &Mat<F>,
) -> Result<(F, F, LossLocalGrads<F>)> {
    let d = rec.x_post.rows();
    let m = rec.z.rows();
    if truth_state.rows() != d || truth_state.cols() != 1 {
        return Err(Error::DimMismatch(format!("truth state must be a {d}-vector")));
    }
    if weight.rows() != d || weight.cols() != d {
        return Err(Error::DimMismatch(format!("weight must be {d}x{d}")));
    }
    let e = rec.x_post.sub(truth_state)?;
    let we = weight.mul(&e)?;
    let l_post = e.frob_dot(&we)?;
    let mut grads = LossLocalGrads::zeros(d, m);
    grads.dl_xpost = we.scale(F::from_f64_lossy(2.0));
    Ok((F::zero(), l_post, grads))
}

/// Ground-truth squared-error loss; weight must be symmetric PSD.
#[derive(Clone, Debug)]
pub struct MseLoss<F> {
    truth: Vec<Mat<F>>,
    weight: Mat<F>,
}

impl<F: Scalar> MseLoss<F> {
    pub fn new(truth: Vec<Mat<F>>, weight: Mat<F>) -> Result<Self> {
        if !weight.is_square() {
            return Err(Error::DimMismatch("weight must be square".into()));
        }
        if !weight.is_symmetric_within(F::symmetry_tol()) {
            return Err(Error::NotSymmetric("MSE weight must be symmetric".into()));
        }
        let mut shifted = weight.clone();
        let slack = F::from_f64_lossy(1e-9) * weight.max_abs().max(F::one());
        for i in 0..weight.rows() {
            shifted[(i, i)] = shifted[(i, i)] + slack;
        }
        if shifted.cholesky().is_err() {
            return Err(Error::InvalidArgument(
                "MSE weight must be positive semi-definite".into(),
            ));
        }
        Ok(MseLoss { truth, weight })
    }

    pub fn weight(&self) -> &Mat<F> {
        &self.weight
    }

    pub fn truth(&self) -> &[Mat<F>] {
        &self.truth
    }
}

impl<F: Scalar> LossSpec<F> for MseLoss<F> {
    fn step_values(&self, step: usize, rec: &StepRecord<F>, _h: &Mat<F>) -> (F, F) {
        let e = rec.x_post.sub(&self.truth[step]).expect("validated dims");
        let we = self.weight.mul(&e).expect("validated dims");
        (F::zero(), e.frob_dot(&we).expect("validated dims"))
    }

    fn step_terms(
        &self,
        step: usize,
        rec: &StepRecord<F>,
        _h: &Mat<F>,
    ) -> (F, F, LossLocalGrads<F>) {
        mse_step(rec, &self.truth[step], &self.weight).expect("validated dims")
    }

    fn validate(&self, tape: &FilterTape<'_, F>) -> Result<()> {
        let d = tape.model.state_dim();
        if self.truth.len() != tape.len() {
            return Err(Error::DimMismatch(format!(
                "loss has {} truth states for a {}-step tape",
                self.truth.len(),
                tape.len()
            )));
        }
        if self.weight.rows() != d {
            return Err(Error::DimMismatch(format!("weight must be {d}x{d}")));
        }
        if self.truth.iter().any(|t| t.rows() != d || t.cols() != 1) {
            return Err(Error::DimMismatch(format!("truth states must be {d}-vectors")));
        }
        Ok(())
    }
}

/// Identically-zero loss; every gradient of it must be zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroLoss;

impl<F: Scalar> LossSpec<F> for ZeroLoss {
    fn step_values(&self, _step: usize, _rec: &StepRecord<F>, _h: &Mat<F>) -> (F, F) {
        (F::zero(), F::zero())
    }

    fn step_terms(
        &self,
        _step: usize,
        rec: &StepRecord<F>,
        h: &Mat<F>,
    ) -> (F, F, LossLocalGrads<F>) {
        let _ = rec;
        (F::zero(), F::zero(), LossLocalGrads::zeros(h.cols(), h.rows()))
    }
}
