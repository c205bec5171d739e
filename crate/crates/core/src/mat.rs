//! Minimal dense linear-algebra kernel.
//!
//! Everything the filter and its differentiation passes need lives here:
//! row-major dense matrices, products, Cholesky factorization of symmetric
//! positive-definite matrices, and triangular solves against the factor.
//! All inverse applications elsewhere in the crate go through [`SpdFactor`];
//! explicit inverse matrices are formed only where a full inverse is itself
//! an output term (see [`SpdFactor::inverse`]).
//!
//! Operations report their scalar multiply counts to [`crate::counter`].

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::counter;
use crate::{Error, Result, Scalar};

/// Dense matrix with row-major storage.
///
/// Column vectors are matrices with a single column; [`Mat::vec`] builds one.
#[derive(Clone, PartialEq)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = F::one();
        }
        m
    }

    /// Diagonal matrix from the given entries.
    pub fn diag(entries: &[F]) -> Self {
        let mut m = Mat::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Build from a row-major slice; entries must be finite.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[F]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries must be finite".into()));
        }
        Ok(Mat {
            rows,
            cols,
            data: data.to_vec(),
        })
    }

    /// Build from nested rows; rows must have equal lengths, entries finite.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimMismatch("rows have unequal lengths".into()));
        }
        let flat: Vec<F> = rows.iter().flatten().copied().collect();
        Mat::from_row_slice(rows.len(), cols, &flat)
    }

    /// Column vector from a slice; entries must be finite.
    pub fn vec(data: &[F]) -> Result<Self> {
        Mat::from_row_slice(data.len(), 1, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Entry count (rows x cols); for column vectors this is the length.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    /// Rows as owned nested vectors (row-major), e.g. for serialization.
    pub fn to_rows(&self) -> Vec<Vec<F>> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].to_vec())
            .collect()
    }

    pub fn transpose(&self) -> Mat<F> {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product; errors on inner-dimension mismatch.
    pub fn mul(&self, rhs: &Mat<F>) -> Result<Mat<F>> {
        if self.cols != rhs.rows {
            return Err(Error::DimMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        Ok(out)
    }

    /// Entrywise sum; errors on shape mismatch.
    pub fn add(&self, rhs: &Mat<F>) -> Result<Mat<F>> {
        self.zip_with(rhs, |a, b| a + b, "add")
    }

    /// Entrywise difference; errors on shape mismatch.
    pub fn sub(&self, rhs: &Mat<F>) -> Result<Mat<F>> {
        self.zip_with(rhs, |a, b| a - b, "sub")
    }

    fn zip_with(&self, rhs: &Mat<F>, f: impl Fn(F, F) -> F, what: &str) -> Result<Mat<F>> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::DimMismatch(format!(
                "cannot {} {}x{} and {}x{}",
                what, self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: F) -> Mat<F> {
        counter::add_multiplies(self.data.len() as u64);
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Symmetric part `(A + Aᵀ)/2`; errors on non-square input.
    ///
    /// Exact fixed point on symmetric matrices and exactly symmetric output
    /// (the two mirrored entries average the same pair of floats).
    pub fn symmetrize(&self) -> Result<Mat<F>> {
        if !self.is_square() {
            return Err(Error::DimMismatch(format!(
                "cannot symmetrize {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let half = F::from_f64_lossy(0.5);
        Ok(Mat::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)]) * half
        }))
    }

    /// Zero out entries above the diagonal.
    pub fn lower_triangular(&self) -> Mat<F> {
        Mat::from_fn(self.rows, self.cols, |i, j| {
            if j <= i {
                self[(i, j)]
            } else {
                F::zero()
            }
        })
    }

    /// Inner product of two equally-shaped matrices, `tr(AᵀB)`.
    pub fn frob_dot(&self, rhs: &Mat<F>) -> Result<F> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::DimMismatch(format!(
                "frob_dot of {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        counter::add_multiplies(self.data.len() as u64);
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_fro(&self) -> F {
        self.data
            .iter()
            .map(|&v| v * v)
            .fold(F::zero(), |acc, v| acc + v)
            .sqrt()
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max asymmetry `|Aᵢⱼ − Aⱼᵢ|` relative to `max(1, max|A|)`.
    pub fn asymmetry(&self) -> F {
        debug_assert!(self.is_square());
        let mut worst = F::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / F::one().max(self.max_abs())
    }

    pub fn is_symmetric_within(&self, rel_tol: F) -> bool {
        self.is_square() && self.asymmetry() <= rel_tol
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix.
    ///
    /// The input must be symmetric within [`Scalar::symmetry_tol`] (relative);
    /// its symmetric part is what gets factored, absorbing round-off from
    /// covariance recursions. Fails with the 0-based pivot index on the first
    /// non-positive pivot.
    pub fn cholesky(&self) -> Result<SpdFactor<F>> {
        if !self.is_square() {
            return Err(Error::DimMismatch(format!(
                "cholesky of {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let tol = F::symmetry_tol();
        if !self.is_symmetric_within(tol) {
            return Err(Error::NotSymmetric(format!(
                "relative asymmetry {:e} exceeds {:e}",
                self.asymmetry(),
                tol
            )));
        }
        let a = self.symmetrize()?;
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag = diag - l[(j, k)] * l[(j, k)];
            }
            if !(diag > F::zero()) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let diag = diag.sqrt();
            l[(j, j)] = diag;
            for i in (j + 1)..n {
                let mut sum = a[(i, j)];
                for k in 0..j {
                    sum = sum - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = sum / diag;
            }
        }
        // j-th column: (n - j) dot products of length j, plus a row of divisions.
        let mults: u64 = (0..n as u64).map(|j| (n as u64 - j) * j + (n as u64 - j)).sum();
        counter::add_multiplies(mults);
        counter::add_factorization();
        Ok(SpdFactor { l })
    }
}

impl<F: Scalar> Mat<F> {
    pub(crate) fn add_assign_mat(&mut self, rhs: &Mat<F>) {
        debug_assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
    }

    pub(crate) fn copy_from(&mut self, rhs: &Mat<F>) {
        debug_assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data.copy_from_slice(&rhs.data);
    }

    pub(crate) fn scale_assign(&mut self, s: F) {
        counter::add_multiplies(self.data.len() as u64);
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    /// In-place `(A + Aᵀ)/2`; square by construction at call sites.
    pub(crate) fn symmetrize_in_place(&mut self) {
        debug_assert!(self.is_square());
        let half = F::from_f64_lossy(0.5);
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let s = (self.data[i * n + j] + self.data[j * n + i]) * half;
                self.data[i * n + j] = s;
                self.data[j * n + i] = s;
            }
        }
    }
}

/// `out = a * b`; shapes must already agree.
#[inline]
pub(crate) fn matmul_into<F: Scalar>(a: &Mat<F>, b: &Mat<F>, out: &mut Mat<F>) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.cols);
    let (n, k, m) = (a.rows, a.cols, b.cols);
    for (arow, orow) in a
        .data
        .chunks_exact(k.max(1))
        .zip(out.data.chunks_exact_mut(m.max(1)))
    {
        orow.fill(F::zero());
        for (&aip, brow) in arow.iter().zip(b.data.chunks_exact(m.max(1))) {
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bpj;
            }
        }
    }
    counter::add_multiplies((n * k * m) as u64);
}

/// `out = base + ½(a wᵀ + w aᵀ)` for column vectors `a`, `w`; exactly
/// symmetric whenever `base` is.
#[inline]
pub(crate) fn sym_rank2_into<F: Scalar>(base: &Mat<F>, a: &Mat<F>, w: &Mat<F>, out: &mut Mat<F>) {
    let d = a.rows;
    debug_assert_eq!((base.rows, base.cols), (d, d));
    debug_assert_eq!((out.rows, out.cols), (d, d));
    debug_assert_eq!(w.rows, d);
    let half = F::from_f64_lossy(0.5);
    for (i, (orow, brow)) in out
        .data
        .chunks_exact_mut(d)
        .zip(base.data.chunks_exact(d))
        .enumerate()
    {
        let ai = a.data[i];
        let wi = w.data[i];
        for (j, (o, &b)) in orow.iter_mut().zip(brow).enumerate() {
            *o = b + (ai * w.data[j] + wi * a.data[j]) * half;
        }
    }
    counter::add_multiplies(3 * (d * d) as u64);
}

/// `out = base + sign · (a * v)` for a column vector `v`; fuses the matrix-
/// vector product with the additive term.
#[inline]
pub(crate) fn matvec_affine_into<F: Scalar>(
    base: &Mat<F>,
    sign: F,
    a: &Mat<F>,
    v: &Mat<F>,
    out: &mut Mat<F>,
) {
    debug_assert_eq!(a.cols, v.rows);
    debug_assert_eq!(v.cols, 1);
    debug_assert_eq!(base.rows, a.rows);
    debug_assert_eq!(out.rows, a.rows);
    let (n, k) = (a.rows, a.cols);
    for ((arow, o), &b) in a
        .data
        .chunks_exact(k.max(1))
        .zip(&mut out.data)
        .zip(&base.data)
    {
        let mut acc = F::zero();
        for (&x, &y) in arow.iter().zip(&v.data) {
            acc = acc + x * y;
        }
        *o = b + sign * acc;
    }
    counter::add_multiplies((n * k + n) as u64);
}

/// `out = a * bᵀ`; `a` is `n x k`, `b` is `m x k`, `out` is `n x m`.
/// Same accumulation order as multiplying by a materialized transpose.
#[inline]
pub(crate) fn matmul_tb_into<F: Scalar>(a: &Mat<F>, b: &Mat<F>, out: &mut Mat<F>) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.rows);
    let (n, k, m) = (a.rows, a.cols, b.rows);
    for (arow, orow) in a
        .data
        .chunks_exact(k.max(1))
        .zip(out.data.chunks_exact_mut(m.max(1)))
    {
        for (brow, o) in b.data.chunks_exact(k.max(1)).zip(orow.iter_mut()) {
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    }
    counter::add_multiplies((n * k * m) as u64);
}

/// `out = aᵀ * b`; `a` is `k x n`, `b` is `k x m`, `out` is `n x m`.
#[inline]
pub(crate) fn matmul_ta_into<F: Scalar>(a: &Mat<F>, b: &Mat<F>, out: &mut Mat<F>) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, b.cols);
    let (k, n, m) = (a.rows, a.cols, b.cols);
    out.data.fill(F::zero());
    for (arow, brow) in a
        .data
        .chunks_exact(n.max(1))
        .zip(b.data.chunks_exact(m.max(1)))
    {
        for (&api, orow) in arow.iter().zip(out.data.chunks_exact_mut(m.max(1))) {
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o = *o + api * bpj;
            }
        }
    }
    counter::add_multiplies((n * k * m) as u64);
}

impl<F: Scalar> Index<(usize, usize)> for Mat<F> {
    type Output = F;
    fn index(&self, (i, j): (usize, usize)) -> &F {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<F: Scalar> IndexMut<(usize, usize)> for Mat<F> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut F {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Linear (row-major) indexing; for column vectors this is the entry index.
impl<F: Scalar> Index<usize> for Mat<F> {
    type Output = F;
    fn index(&self, i: usize) -> &F {
        &self.data[i]
    }
}

impl<F: Scalar> IndexMut<usize> for Mat<F> {
    fn index_mut(&mut self, i: usize) -> &mut F {
        &mut self.data[i]
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $impl:ident) => {
        impl<F: Scalar> $trait<&Mat<F>> for &Mat<F> {
            type Output = Mat<F>;
            fn $method(self, rhs: &Mat<F>) -> Mat<F> {
                self.$impl(rhs).expect(concat!("matrix ", stringify!($method)))
            }
        }
    };
}

binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);

impl<F: Scalar> Mul<F> for &Mat<F> {
    type Output = Mat<F>;
    fn mul(self, s: F) -> Mat<F> {
        self.scale(s)
    }
}

impl<F: Scalar> Neg for &Mat<F> {
    type Output = Mat<F>;
    fn neg(self) -> Mat<F> {
        self.scale(-F::one())
    }
}

impl<F: fmt::Debug> fmt::Debug for Mat<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols.max(1)) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl<F: Serialize> Serialize for Mat<F> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.data.chunks(self.cols.max(1)))
    }
}

impl<'de, F: Scalar + Deserialize<'de>> Deserialize<'de> for Mat<F> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<F>>::deserialize(deserializer)?;
        Mat::from_rows(&rows).map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct SpdFactor<F> {
    l: Mat<F>,
}

impl<F: Scalar> SpdFactor<F> {
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// The lower-triangular factor `L` with `L Lᵀ = A`.
    pub fn lower(&self) -> &Mat<F> {
        &self.l
    }

    /// Wrap an explicit lower-triangular factor; diagonal must be positive.
    pub fn from_lower(l: Mat<F>) -> Result<Self> {
        if !l.is_square() {
            return Err(Error::DimMismatch("factor must be square".into()));
        }
        for i in 0..l.rows() {
            if !(l[(i, i)] > F::zero()) {
                return Err(Error::NotPositiveDefinite { pivot: i });
            }
            for j in (i + 1)..l.cols() {
                if l[(i, j)] != F::zero() {
                    return Err(Error::InvalidArgument(
                        "factor must be lower-triangular".into(),
                    ));
                }
            }
        }
        Ok(SpdFactor { l })
    }

    /// Solve `(L Lᵀ) X = B` by forward and back substitution.
    pub fn solve(&self, b: &Mat<F>) -> Result<Mat<F>> {
        let mut x = b.clone();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }

    /// Solve into a preallocated output of `b`'s shape.
    pub(crate) fn solve_into(&self, b: &Mat<F>, out: &mut Mat<F>) {
        out.copy_from(b);
        self.solve_in_place(out).expect("caller sized the rhs");
    }

    pub(crate) fn solve_in_place(&self, x: &mut Mat<F>) -> Result<()> {
        let n = self.dim();
        if x.rows() != n {
            return Err(Error::DimMismatch(format!(
                "solve: factor dim {} vs rhs rows {}",
                n,
                x.rows()
            )));
        }
        let k = x.cols();
        // L w = b
        for col in 0..k {
            for i in 0..n {
                let mut sum = x[(i, col)];
                for j in 0..i {
                    sum = sum - self.l[(i, j)] * x[(j, col)];
                }
                x[(i, col)] = sum / self.l[(i, i)];
            }
        }
        // Lᵀ x = w
        for col in 0..k {
            for i in (0..n).rev() {
                let mut sum = x[(i, col)];
                for j in (i + 1)..n {
                    sum = sum - self.l[(j, i)] * x[(j, col)];
                }
                x[(i, col)] = sum / self.l[(i, i)];
            }
        }
        counter::add_multiplies((k * n * (n + 1)) as u64);
        Ok(())
    }

    /// `log det A = 2 Σ log Lᵢᵢ`.
    pub fn logdet(&self) -> F {
        let two = F::from_f64_lossy(2.0);
        let sum: F = (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum();
        two * sum
    }

    /// Rebuild `A = L Lᵀ`.
    pub fn reconstruct(&self) -> Mat<F> {
        &self.l * &self.l.transpose()
    }

    /// Explicit `A⁻¹` by solving against the identity.
    ///
    /// Only for places where the full inverse is itself an output term;
    /// prefer [`SpdFactor::solve`] everywhere else.
    pub fn inverse(&self) -> Mat<F> {
        let mut x = Mat::identity(self.dim());
        self.solve_in_place(&mut x)
            .expect("identity rhs always matches factor dim");
        x
    }
}
