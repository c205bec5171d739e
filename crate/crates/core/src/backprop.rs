//! Reverse-mode differentiation of the filter: one backward sweep over the
//! tape yields the gradients of the total loss w.r.t. every tuning parameter.
//!
//! Walking the tape from the last step to the first, the posterior adjoints
//! `∂𝓛/∂x̂ₙ|ₙ` and `∂𝓛/∂Pₙ|ₙ` are pulled back through the update and
//! prediction equations:
//!
//! ```text
//! ∂𝓛/∂x̂ₙ|ₙ₋₁ = (I−KH)ᵀ ∂𝓛/∂x̂ₙ|ₙ + ∂lₙ|ₙ₋₁/∂x̂ₙ|ₙ₋₁
//! ∂𝓛/∂Pₙ|ₙ₋₁ = (I−KH)ᵀ [∂𝓛/∂Pₙ|ₙ + ½ ∂𝓛/∂x̂ₙ|ₙ zᵀR⁻¹H
//!                        + ½ HᵀR⁻¹z (∂𝓛/∂x̂ₙ|ₙ)ᵀ] (I−KH) + ∂lₙ|ₙ₋₁/∂Pₙ|ₙ₋₁
//! ∂𝓛/∂yₙ     = Kᵀ ∂𝓛/∂x̂ₙ|ₙ + ∂lₙ|ₙ₋₁/∂yₙ
//! ∂𝓛/∂Qₙ     = ∂𝓛/∂Pₙ|ₙ₋₁
//! ∂𝓛/∂Rₙ     = Kᵀ ∂𝓛/∂Pₙ|ₙ K − ½ Kᵀ ∂𝓛/∂x̂ₙ|ₙ zᵀS⁻¹
//!                        − ½ S⁻¹z (∂𝓛/∂x̂ₙ|ₙ)ᵀ K + ∂lₙ|ₙ₋₁/∂Rₙ
//! ∂𝓛/∂x̂ₙ₋₁|ₙ₋₁ = Fᵀ ∂𝓛/∂x̂ₙ|ₙ₋₁ + ∂lₙ₋₁|ₙ₋₁/∂x̂ₙ₋₁|ₙ₋₁
//! ∂𝓛/∂Pₙ₋₁|ₙ₋₁ = Fᵀ ∂𝓛/∂Pₙ|ₙ₋₁ F + ∂lₙ₋₁|ₙ₋₁/∂Pₙ₋₁|ₙ₋₁
//! ```
//!
//! After step 0 the surviving posterior adjoints are exactly `∂𝓛/∂x̂₀|₀` and
//! `∂𝓛/∂P₀|₀`, i.e. the gradients w.r.t. the initial state and covariance;
//! the filter treats `(x₀, P₀)` as the posterior at step 0.
//!
//! The ½ cross terms keep every stored matrix gradient symmetric: the
//! recursion propagates symmetric-part gradients so that a descent update
//! preserves the symmetry of the parameter matrices. Within each step only
//! matrix products are performed — `S⁻¹z` and `I−KH` come off the tape, and
//! `R⁻¹z` is solved against the model's `R` factor (factored once when `R`
//! is static), so the per-step cost is a fixed number of `d×d`/`d×m`
//! multiplies regardless of `N`.

use crate::counter;
use crate::filter::{FilterTape, MatSeq};
use crate::loss::{LossLocalGrads, LossSpec};
use crate::mat::{matmul_into, matmul_ta_into, sym_rank2_into, Mat};
use crate::{Error, Result, Scalar};

/// Gradients of the total loss w.r.t. every tuning parameter.
///
/// Per-step sequences are always materialized; the static sums are the
/// fold of the per-step entries in step order, so `dq_static` equals
/// `Σₙ dq_steps[n]` bitwise (and likewise for `dr_static`).
#[derive(Clone, Debug)]
pub struct GradientSet<F> {
    /// `∂𝓛/∂P₀` (d x d, symmetric).
    pub dp0: Mat<F>,
    /// `∂𝓛/∂x₀` (d-vector).
    pub dx0: Mat<F>,
    /// `∂𝓛/∂Qₙ` per step (d x d, symmetric).
    pub dq_steps: Vec<Mat<F>>,
    /// `∂𝓛/∂Rₙ` per step (m x m, symmetric).
    pub dr_steps: Vec<Mat<F>>,
    /// `Σₙ ∂𝓛/∂Qₙ`, the gradient w.r.t. a static `Q`.
    pub dq_static: Mat<F>,
    /// `Σₙ ∂𝓛/∂Rₙ`, the gradient w.r.t. a static `R`.
    pub dr_static: Mat<F>,
    /// `∂𝓛/∂yₙ` per step (m-vectors).
    pub dy: Vec<Mat<F>>,
}

/// Adjoint state carried across one backward step.
#[derive(Clone, Debug)]
pub struct Adjoint<F> {
    /// `∂𝓛/∂x̂ₙ|ₙ`.
    pub ax_post: Mat<F>,
    /// `∂𝓛/∂Pₙ|ₙ` (symmetric).
    pub ap_post: Mat<F>,
    /// `∂𝓛/∂x̂ₙ|ₙ₋₁`.
    pub ax_prior: Mat<F>,
    /// `∂𝓛/∂Pₙ|ₙ₋₁` (symmetric).
    pub ap_prior: Mat<F>,
}

/// One backward pass over the tape.
pub fn backward<F: Scalar, L: LossSpec<F> + ?Sized>(
    tape: &FilterTape<'_, F>,
    spec: &L,
) -> Result<GradientSet<F>> {
    if tape.is_empty() {
        return Err(Error::InvalidArgument("tape is empty".into()));
    }
    spec.validate(tape)?;
    let model = tape.model;
    let n_steps = tape.len();
    let d = model.state_dim();
    let m = model.meas_dim();
    let half = F::from_f64_lossy(0.5);

    // Local gradients are consumed two steps at a time (step n and, during
    // propagation, step n−1); keeping just those two slots live keeps the
    // backward sweep's working set at the tape itself.
    let local_at = |n: usize| spec.step_terms(n, &tape.steps[n], model.h.at(n)).2;

    // A static R is factored once up front; only triangular solves happen
    // inside the loop. Per-step R sequences cost one small factor per step.
    let r_static_factor = match &model.r {
        MatSeq::Static(r) => Some(r.cholesky()?),
        MatSeq::PerStep(_) => None,
    };

    let mut dq_steps = vec![Mat::zeros(d, d); n_steps];
    let mut dr_steps = vec![Mat::zeros(m, m); n_steps];
    let mut dy = vec![Mat::zeros(m, 1); n_steps];

    let mut g_cur: LossLocalGrads<F> = local_at(n_steps - 1);
    let mut adj = Adjoint {
        ax_post: g_cur.dl_xpost.clone(),
        ap_post: g_cur.dl_ppost.symmetrize()?,
        ax_prior: Mat::zeros(d, 1),
        ap_prior: Mat::zeros(d, d),
    };

    // Scratch buffers reused across all steps. The per-step results are
    // written straight into the preallocated output vectors, so the loop
    // body performs no allocations at all (for static R).
    let mut rz = Mat::zeros(m, 1);
    let mut w = Mat::zeros(d, 1);
    let mut inner = Mat::zeros(d, d);
    let mut t_dd = Mat::zeros(d, d);
    let mut t_md = Mat::zeros(m, d);
    let mut kt_ax = Mat::zeros(m, 1);
    let mut ax_next = Mat::zeros(d, 1);
    let mut ap_next = Mat::zeros(d, d);

    for n in (0..n_steps).rev() {
        let rec = &tape.steps[n];
        let g = &g_cur;
        let h = model.h.at(n);
        let f = model.f.at(n);

        matmul_ta_into(&rec.ikh, &adj.ax_post, &mut adj.ax_prior);
        adj.ax_prior.add_assign_mat(&g.dl_xprior);

        match &r_static_factor {
            Some(fact) => fact.solve_into(&rec.z, &mut rz),
            None => match &model.r {
                MatSeq::PerStep(rs) => rs[n]
                    .cholesky()
                    .map_err(|e| e.at_step(n))?
                    .solve_into(&rec.z, &mut rz),
                MatSeq::Static(_) => unreachable!("static R factored above"),
            },
        }
        matmul_ta_into(h, &rz, &mut w);
        // inner = ∂𝓛/∂P⁺ + ½(∂𝓛/∂x⁺ wᵀ + w (∂𝓛/∂x⁺)ᵀ)
        sym_rank2_into(&adj.ap_post, &adj.ax_post, &w, &mut inner);
        // ∂𝓛/∂Qₙ is exactly the prior covariance adjoint; build it in place.
        let ap_prior = &mut dq_steps[n];
        matmul_ta_into(&rec.ikh, &inner, &mut t_dd);
        matmul_into(&t_dd, &rec.ikh, ap_prior);
        ap_prior.add_assign_mat(&g.dl_pprior);
        ap_prior.symmetrize_in_place();

        matmul_ta_into(&rec.k, &adj.ax_post, &mut kt_ax);
        dy[n].copy_from(&kt_ax);
        dy[n].add_assign_mat(&g.dl_y);

        let dr = &mut dr_steps[n];
        matmul_ta_into(&rec.k, &adj.ap_post, &mut t_md);
        matmul_into(&t_md, &rec.k, dr);
        for i in 0..m {
            for j in 0..m {
                dr[(i, j)] = dr[(i, j)] + g.dl_r[(i, j)]
                    - (kt_ax[i] * rec.sinv_z[j] + rec.sinv_z[i] * kt_ax[j]) * half;
            }
        }
        counter::add_multiplies(3 * (m * m) as u64);
        dr.symmetrize_in_place();

        let ap_prior = &dq_steps[n];
        matmul_ta_into(f, &adj.ax_prior, &mut ax_next);
        matmul_ta_into(f, ap_prior, &mut t_dd);
        matmul_into(&t_dd, f, &mut ap_next);
        if n > 0 {
            let g_prev = local_at(n - 1);
            ax_next.add_assign_mat(&g_prev.dl_xpost);
            ap_next.add_assign_mat(&g_prev.dl_ppost);
            g_cur = g_prev;
        }
        ap_next.symmetrize_in_place();
        std::mem::swap(&mut adj.ax_post, &mut ax_next);
        std::mem::swap(&mut adj.ap_post, &mut ap_next);
    }

    let mut dq_static = Mat::zeros(d, d);
    let mut dr_static = Mat::zeros(m, m);
    for g in &dq_steps {
        dq_static = dq_static.add(g)?;
    }
    for g in &dr_steps {
        dr_static = dr_static.add(g)?;
    }

    Ok(GradientSet {
        dp0: adj.ap_post,
        dx0: adj.ax_post,
        dq_steps,
        dr_steps,
        dq_static,
        dr_static,
        dy,
    })
}

/// Gradient w.r.t. a lower-triangular square-root factor: for a covariance
/// parameterized as `M = L Lᵀ`, `∂𝓛/∂L = 2 (∂𝓛/∂M) L`, masked to the
/// lower triangle (the strict upper entries of `L` are not free).
pub fn sqrt_factor_grad<F: Scalar>(dm: &Mat<F>, l: &Mat<F>) -> Result<Mat<F>> {
    if !dm.is_square() || dm.rows() != l.rows() || !l.is_square() {
        return Err(Error::DimMismatch(format!(
            "sqrt_factor_grad: gradient {}x{} vs factor {}x{}",
            dm.rows(),
            dm.cols(),
            l.rows(),
            l.cols()
        )));
    }
    if !dm.is_symmetric_within(F::symmetry_tol()) {
        return Err(Error::NotSymmetric(
            "covariance gradient must be symmetric".into(),
        ));
    }
    Ok(dm.mul(l)?.scale(F::from_f64_lossy(2.0)).lower_triangular())
}

/// Which single gradient to extract from a backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTag {
    P0,
    X0,
    QStatic,
    RStatic,
    /// `∂𝓛/∂Qₙ` at the given 0-based step.
    QStep(usize),
    /// `∂𝓛/∂Rₙ` at the given 0-based step.
    RStep(usize),
    /// `∂𝓛/∂yₙ` at the given 0-based step.
    Y(usize),
    /// Gradient w.r.t. the Cholesky factor of a static `R`.
    LOfR,
    /// Gradient w.r.t. the Cholesky factor of a static `Q`.
    LOfQ,
    /// Gradient w.r.t. the Cholesky factor of `P₀`.
    LOfP0,
}

/// Convenience wrapper: one backward pass, one extracted gradient.
pub fn grad_wrt<F: Scalar, L: LossSpec<F> + ?Sized>(
    tape: &FilterTape<'_, F>,
    spec: &L,
    which: ParamTag,
) -> Result<Mat<F>> {
    let gs = backward(tape, spec)?;
    let step_ok = |n: usize| {
        if n < tape.len() {
            Ok(n)
        } else {
            Err(Error::InvalidArgument(format!(
                "step {n} out of range for a {}-step tape",
                tape.len()
            )))
        }
    };
    let factor_of = |seq: &MatSeq<F>, name: &str| {
        seq.as_static()
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "factor gradient needs a static {name}"
                ))
            })?
            .cholesky()
    };
    Ok(match which {
        ParamTag::P0 => gs.dp0,
        ParamTag::X0 => gs.dx0,
        ParamTag::QStatic => gs.dq_static,
        ParamTag::RStatic => gs.dr_static,
        ParamTag::QStep(n) => gs.dq_steps[step_ok(n)?].clone(),
        ParamTag::RStep(n) => gs.dr_steps[step_ok(n)?].clone(),
        ParamTag::Y(n) => gs.dy[step_ok(n)?].clone(),
        ParamTag::LOfR => {
            let f = factor_of(&tape.model.r, "R")?;
            sqrt_factor_grad(&gs.dr_static, f.lower())?
        }
        ParamTag::LOfQ => {
            let f = factor_of(&tape.model.q, "Q")?;
            sqrt_factor_grad(&gs.dq_static, f.lower())?
        }
        ParamTag::LOfP0 => {
            let f = tape.model.p0.cholesky()?;
            sqrt_factor_grad(&gs.dp0, f.lower())?
        }
    })
}
