//! Central finite-difference gradients over the whole pipeline
//! (model → filter → loss) — the ground truth the analytic passes are
//! checked against.
//!
//! Symmetric matrix parameters are perturbed with the symmetric-pair
//! convention: coordinates `(i, j)` and `(j, i)` move jointly, which probes
//! `2·gradᵢⱼ` off the diagonal. Covariances can also be perturbed through
//! their Cholesky factor, which never leaves the positive-definite cone and
//! directly validates the factor-gradient chain rule.

use crate::filter::{run_filter, FilterModel, MatSeq};
use crate::loss::{total_loss, LossSpec};
use crate::mat::Mat;
use crate::sensitivity::{ParamSelector, ParamTarget};
use crate::{Error, Result, Scalar};

/// Step-size rule for central differences.
///
/// The step for a coordinate with value `θ` is `base_step · max(1, |θ|)`;
/// the default base is `cbrt(machine epsilon)`, balancing truncation
/// against round-off for a two-point scheme.
#[derive(Clone, Copy, Debug)]
pub struct FdConfig<F> {
    pub base_step: F,
}

impl<F: Scalar> Default for FdConfig<F> {
    fn default() -> Self {
        FdConfig {
            base_step: F::epsilon().cbrt(),
        }
    }
}

impl<F: Scalar> FdConfig<F> {
    pub fn with_base_step(base_step: F) -> Self {
        FdConfig { base_step }
    }

    fn step_for(&self, theta: F) -> F {
        self.base_step * F::one().max(theta.abs())
    }
}

/// Central two-point difference of `f` at `at`.
pub(crate) fn central_diff<F: Scalar>(
    mut f: impl FnMut(F) -> Result<F>,
    at: F,
    h: F,
) -> Result<F> {
    let two = F::from_f64_lossy(2.0);
    Ok((f(at + h)? - f(at - h)?) / (two * h))
}

fn eval_loss<F: Scalar, L: LossSpec<F> + ?Sized>(
    model: &FilterModel<F>,
    ys: &[Mat<F>],
    spec: &L,
) -> Result<F> {
    let tape = run_filter(model, ys).map_err(|e| {
        if e.is_not_positive_definite() {
            Error::FdPerturbation(e.to_string())
        } else {
            e
        }
    })?;
    total_loss(&tape, spec)
}

fn bump<F: Scalar>(m: &mut Mat<F>, sel: &ParamSelector, delta: F) {
    let (i, j) = sel.coord;
    m[(i, j)] = m[(i, j)] + delta;
    if sel.symmetric_pair && i != j {
        m[(j, i)] = m[(j, i)] + delta;
    }
}

fn perturbed<F: Scalar>(
    model: &FilterModel<F>,
    ys: &[Mat<F>],
    sel: &ParamSelector,
    delta: F,
) -> (FilterModel<F>, Vec<Mat<F>>) {
    let mut model = model.clone();
    let mut ys = ys.to_vec();
    match sel.target {
        ParamTarget::P0 => bump(&mut model.p0, sel, delta),
        ParamTarget::X0 => model.x0[sel.coord.0] = model.x0[sel.coord.0] + delta,
        ParamTarget::Y => {
            let y = &mut ys[sel.step.expect("validated")];
            y[sel.coord.0] = y[sel.coord.0] + delta;
        }
        ParamTarget::Q => perturb_seq(&mut model.q, sel, delta, ys.len()),
        ParamTarget::R => perturb_seq(&mut model.r, sel, delta, ys.len()),
    }
    (model, ys)
}

fn perturb_seq<F: Scalar>(seq: &mut MatSeq<F>, sel: &ParamSelector, delta: F, n_steps: usize) {
    match sel.step {
        // Static coordinate: shared by every step.
        None => match seq {
            MatSeq::Static(m) => bump(m, sel, delta),
            MatSeq::PerStep(v) => v.iter_mut().for_each(|m| bump(m, sel, delta)),
        },
        // Per-step coordinate: materialize and touch one step only.
        Some(n) => {
            let mut steps = seq.to_per_step(n_steps);
            bump(&mut steps[n], sel, delta);
            *seq = MatSeq::PerStep(steps);
        }
    }
}

fn coordinate_value<F: Scalar>(model: &FilterModel<F>, sel: &ParamSelector) -> F {
    let (i, j) = sel.coord;
    match sel.target {
        ParamTarget::P0 => model.p0[(i, j)],
        ParamTarget::X0 => model.x0[i],
        ParamTarget::Y => F::zero(),
        ParamTarget::Q => model.q.at(sel.step.unwrap_or(0))[(i, j)],
        ParamTarget::R => model.r.at(sel.step.unwrap_or(0))[(i, j)],
    }
}

/// Central difference of the total loss along one selector coordinate.
pub fn fd_gradient<F: Scalar, L: LossSpec<F> + ?Sized>(
    model: &FilterModel<F>,
    ys: &[Mat<F>],
    spec: &L,
    sel: &ParamSelector,
    cfg: &FdConfig<F>,
) -> Result<F> {
    model.validate(ys.len())?;
    sel.validate(model, ys.len())?;
    let h = cfg.step_for(coordinate_value(model, sel));
    central_diff(
        |delta| {
            let (m, d) = perturbed(model, ys, sel, delta);
            eval_loss(&m, &d, spec)
        },
        F::zero(),
        h,
    )
}

/// One Richardson extrapolation level: combines estimates at `h` and `h/2`
/// into `(4·D(h/2) − D(h)) / 3`, cancelling the leading truncation term.
pub fn fd_gradient_richardson<F: Scalar, L: LossSpec<F> + ?Sized>(
    model: &FilterModel<F>,
    ys: &[Mat<F>],
    spec: &L,
    sel: &ParamSelector,
    cfg: &FdConfig<F>,
) -> Result<F> {
    let coarse = fd_gradient(model, ys, spec, sel, cfg)?;
    let halved = FdConfig::with_base_step(cfg.base_step * F::from_f64_lossy(0.5));
    let fine = fd_gradient(model, ys, spec, sel, &halved)?;
    let four = F::from_f64_lossy(4.0);
    let three = F::from_f64_lossy(3.0);
    Ok((four * fine - coarse) / three)
}

/// Full finite-difference gradient matrix of a static symmetric target,
/// off-diagonal pair derivatives halved back to single-entry gradients.
pub fn fd_full<F: Scalar, L: LossSpec<F> + ?Sized>(
    model: &FilterModel<F>,
    ys: &[Mat<F>],
    spec: &L,
    target: ParamTarget,
    cfg: &FdConfig<F>,
) -> Result<Mat<F>> {
    let dim = match target {
        ParamTarget::P0 | ParamTarget::Q => model.state_dim(),
        ParamTarget::R => model.meas_dim(),
        ParamTarget::X0 | ParamTarget::Y => {
            return Err(Error::InvalidArgument(
                "fd_full covers matrix targets P0/Q/R".into(),
            ))
        }
    };
    let half = F::from_f64_lossy(0.5);
    let mut grad = Mat::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let v = fd_gradient(model, ys, spec, &ParamSelector::sym_pair(target, i, j), cfg)?;
            if i == j {
                grad[(i, i)] = v;
            } else {
                grad[(i, j)] = v * half;
                grad[(j, i)] = v * half;
            }
        }
    }
    Ok(grad)
}

/// Covariance parameter addressable through its Cholesky factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovParam {
    P0,
    QStatic,
    RStatic,
}

/// Central difference of the loss w.r.t. one free (lower-triangular) entry
/// of the covariance's Cholesky factor: the covariance is rebuilt as `L Lᵀ`
/// from the perturbed factor, so the perturbation can never leave the
/// positive-semi-definite cone.
pub fn fd_factor_gradient<F: Scalar, L: LossSpec<F> + ?Sized>(
    model: &FilterModel<F>,
    ys: &[Mat<F>],
    spec: &L,
    which: CovParam,
    coord: (usize, usize),
    cfg: &FdConfig<F>,
) -> Result<F> {
    model.validate(ys.len())?;
    let base = match which {
        CovParam::P0 => model.p0.clone(),
        CovParam::QStatic => model
            .q
            .as_static()
            .ok_or_else(|| Error::InvalidArgument("factor perturbation needs a static Q".into()))?
            .clone(),
        CovParam::RStatic => model
            .r
            .as_static()
            .ok_or_else(|| Error::InvalidArgument("factor perturbation needs a static R".into()))?
            .clone(),
    };
    let (i, j) = coord;
    if j > i || i >= base.rows() {
        return Err(Error::InvalidArgument(format!(
            "({i}, {j}) is not a lower-triangular coordinate of a {}x{} factor",
            base.rows(),
            base.rows()
        )));
    }
    let l0 = base.cholesky()?.lower().clone();
    let h = cfg.step_for(l0[(i, j)]);
    central_diff(
        |delta| {
            let mut l = l0.clone();
            l[(i, j)] = l[(i, j)] + delta;
            let rebuilt = l.mul(&l.transpose())?.symmetrize()?;
            let mut m = model.clone();
            match which {
                CovParam::P0 => m.p0 = rebuilt,
                CovParam::QStatic => m.q = MatSeq::Static(rebuilt),
                CovParam::RStatic => m.r = MatSeq::Static(rebuilt),
            }
            eval_loss(&m, &ys.to_vec(), spec)
        },
        F::zero(),
        h,
    )
}
