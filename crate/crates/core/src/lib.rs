//! Linear Kalman filtering with exact reverse-mode parameter gradients.
//!
//! The crate runs a linear-Gaussian Kalman filter while recording a tape of
//! intermediates, then differentiates any scalar loss of the filter outputs
//! with respect to every tuning parameter (initial covariance, process and
//! measurement noise, measurements, initial state) in a single backward pass
//! of matrix products. A classical forward sensitivity recursion and a
//! central finite-difference oracle provide two independent baselines, and a
//! fixed-step gradient-descent fitter tunes covariances through their
//! Cholesky factors.
//!
//! All numerics are generic over the scalar type via [`Scalar`]; `f64` is the
//! working precision the documented tolerances refer to.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub mod backprop;
pub mod bench;
pub mod counter;
pub mod fd;
pub mod filter;
pub mod loss;
pub mod mat;
pub mod optimizer;
pub mod sensitivity;
pub mod sim;

pub use backprop::{backward, grad_wrt, sqrt_factor_grad, GradientSet, ParamTag};
pub use fd::{fd_factor_gradient, fd_full, fd_gradient, CovParam, FdConfig};
pub use filter::{run_filter, FilterModel, FilterTape, StepRecord};
pub use loss::{total_loss, LossLocalGrads, LossSpec, MseLoss, NllLoss, ZeroLoss};
pub use mat::{Mat, SpdFactor};
pub use optimizer::{fit, FitConfig, FitReport, FitTarget};
pub use sensitivity::{
    forward_sensitivity, full_gradient_forward, ParamSelector, ParamTarget,
};
pub use sim::{model_from_sim, simulate, SimConfig, Trajectory};

/// Floating-point scalar the whole crate is generic over.
///
/// Implemented for `f32` and `f64`. The per-type `symmetry_tol` scales the
/// relative tolerance used when validating symmetric inputs before
/// factorization, so the `f32` instantiation stays usable despite its wider
/// rounding.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Relative tolerance for symmetry preconditions.
    fn symmetry_tol() -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant must convert to scalar type")
    }
}

impl Scalar for f64 {
    fn symmetry_tol() -> f64 {
        1e-10
    }
}

impl Scalar for f32 {
    fn symmetry_tol() -> f32 {
        1e-4
    }
}

/// Dense matrix over `f64`, the default working precision.
pub type Mat64 = Mat<f64>;
/// Dense matrix over `f32`.
pub type Mat32 = Mat<f32>;
/// Filter model over `f64`.
pub type FilterModel64 = FilterModel<f64>;
/// Gradient bundle over `f64`.
pub type GradientSet64 = GradientSet<f64>;
/// Simulator configuration over `f64`.
pub type SimConfig64 = SimConfig<f64>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    /// A matrix required to be symmetric is not, beyond tolerance.
    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),
    /// Cholesky factorization hit a non-positive pivot (0-based index).
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    /// A covariance parameter failed its positive-semi-definiteness check.
    #[error("{param} must be positive semi-definite")]
    NotPositiveSemiDefinite { param: String },
    /// Invalid argument or configuration.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A non-finite value was found where finite input is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A finite-difference perturbation left the feasible region.
    #[error(
        "finite-difference perturbation broke positive definiteness ({0}); \
         shrink the step or perturb the square-root factor instead"
    )]
    FdPerturbation(String),
    /// Error attributed to a specific filter step (0-based).
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    /// Error attributed to a specific fit iteration.
    #[error("fit iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    /// Loss became non-finite while fitting.
    #[error("fit diverged at iteration {iteration}: loss is not finite")]
    FitDiverged { iteration: usize },
    /// File I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Error {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// True when the root cause is a failed positive-(semi-)definiteness check.
    pub fn is_not_positive_definite(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. } | Error::NotPositiveSemiDefinite { .. } => true,
            Error::AtStep { source, .. } | Error::AtIteration { source, .. } => {
                source.is_not_positive_definite()
            }
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
