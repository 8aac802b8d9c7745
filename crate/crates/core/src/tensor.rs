//! Row-major dense kernels shared by every network in the crate.
//!
//! Inference paths run in `f32`, gradient checks in `f64`; everything is
//! generic over [`Scalar`]. The leading dimension of a [`Batch`] is always the
//! sample index.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use wide::f32x8;

use crate::rng::Rng;
use crate::{Error, Result};

/// Floating point element type with a GEMM backend.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + Sum
    + 'static
{
    /// `c = a · b + beta · c` with explicit strides (rows, cols) for every
    /// operand. `a` is `m × k`, `b` is `k × n`, `c` is `m × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// [`elu_scalar`] over a slice, in place.
    fn elu_slice(xs: &mut [Self], alpha: Self) {
        for v in xs {
            let neg = alpha * (v.min(Self::zero()).exp() - Self::one());
            *v = if *v > Self::zero() || v.is_nan() { *v } else { neg };
        }
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f32], isize, isize),
        b: (&[f32], isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_extent(m, k, a.0.len(), a.1, a.2);
        check_gemm_extent(k, n, b.0.len(), b.1, b.2);
        assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents of all three operands were checked above and `c`
        // is exclusively borrowed.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn elu_slice(xs: &mut [f32], alpha: f32) {
        let (zero, a) = (f32x8::ZERO, f32x8::splat(alpha));
        let mut chunks = xs.chunks_exact_mut(8);
        for c in &mut chunks {
            let v = f32x8::from(&*c);
            let neg = a * v.fast_min(zero).exp_m1();
            let keep = v.simd_gt(zero) | v.simd_ne(v);
            c.copy_from_slice(&keep.bitselect(v, neg).to_array());
        }
        for v in chunks.into_remainder() {
            *v = elu_scalar(*v, alpha);
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f64], isize, isize),
        b: (&[f64], isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_extent(m, k, a.0.len(), a.1, a.2);
        check_gemm_extent(k, n, b.0.len(), b.1, b.2);
        assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

fn check_gemm_extent(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

/// Dense row-major matrix. Holds weights: gates, noise, experts, linear layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::new",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| T::lit(rng.uniform_range(-bound, bound)))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Matrix–matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "Matrix::matmul",
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        T::gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            T::zero(),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self -= lr * grad`, entrywise.
    pub fn sub_scaled(&mut self, grad: &Matrix<T>, lr: T) {
        debug_assert_eq!(self.data.len(), grad.data.len());
        for (w, g) in self.data.iter_mut().zip(&grad.data) {
            *w -= lr * *g;
        }
    }
}

/// A batch of row vectors, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    batch_size: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(batch_size: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch_size * dim {
            return Err(Error::DimensionMismatch {
                op: "Batch::new",
                expected: batch_size * dim,
                found: data.len(),
            });
        }
        Ok(Self {
            batch_size,
            dim,
            data,
        })
    }

    pub fn zeros(batch_size: usize, dim: usize) -> Self {
        Self {
            batch_size,
            dim,
            data: vec![T::zero(); batch_size * dim],
        }
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    op: "Batch::from_rows",
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            batch_size: rows.len(),
            dim,
            data,
        })
    }

    pub fn uniform(batch_size: usize, dim: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..batch_size * dim)
            .map(|_| T::lit(rng.uniform_range(lo, hi)))
            .collect();
        Self {
            batch_size,
            dim,
            data,
        }
    }

    /// I.i.d. standard normal entries.
    pub fn standard_normal(batch_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let data = rng
            .standard_normal(batch_size * dim)
            .into_iter()
            .map(T::lit)
            .collect();
        Self {
            batch_size,
            dim,
            data,
        }
    }

    #[inline]
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.dim.max(1)).take(self.batch_size)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            batch_size: self.batch_size,
            dim: self.dim,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Batch<T> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Batch {
            batch_size: idx.len(),
            dim: self.dim,
            data,
        }
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sum: T = self.data.iter().copied().sum();
        sum / T::lit(self.data.len() as f64)
    }

    pub fn add_row_vector(&mut self, v: &[T]) {
        debug_assert_eq!(v.len(), self.dim);
        for row in self.data.chunks_exact_mut(self.dim.max(1)) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += *b;
            }
        }
    }

    /// Column sums, a `dim`-vector.
    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        out
    }
}

/// Batched product `a · w`: `(batch, in) × (in, out) → (batch, out)`.
pub fn matmul<T: Scalar>(a: &Batch<T>, w: &Matrix<T>) -> Result<Batch<T>> {
    if a.dim != w.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            expected: w.rows,
            found: a.dim,
        });
    }
    let mut out = Batch::zeros(a.batch_size, w.cols);
    T::gemm(
        a.batch_size,
        a.dim,
        w.cols,
        (&a.data, a.dim as isize, 1),
        (&w.data, w.cols as isize, 1),
        T::zero(),
        &mut out.data,
    );
    Ok(out)
}

/// `a · w + bias`, with the bias broadcast over rows.
pub fn affine<T: Scalar>(a: &Batch<T>, w: &Matrix<T>, bias: &[T]) -> Result<Batch<T>> {
    if a.dim != w.rows {
        return Err(Error::DimensionMismatch {
            op: "affine",
            expected: w.rows,
            found: a.dim,
        });
    }
    if bias.len() != w.cols {
        return Err(Error::DimensionMismatch {
            op: "affine bias",
            expected: w.cols,
            found: bias.len(),
        });
    }
    let mut data = Vec::with_capacity(a.batch_size * w.cols);
    for _ in 0..a.batch_size {
        data.extend_from_slice(bias);
    }
    let mut out = Batch::new(a.batch_size, w.cols, data)?;
    T::gemm(
        a.batch_size,
        a.dim,
        w.cols,
        (&a.data, a.dim as isize, 1),
        (&w.data, w.cols as isize, 1),
        T::one(),
        &mut out.data,
    );
    Ok(out)
}

/// `a · wᵀ`: `(batch, out) × (in, out)ᵀ → (batch, in)`. Used to push gradients
/// back through a weight matrix.
pub fn matmul_transposed<T: Scalar>(a: &Batch<T>, w: &Matrix<T>) -> Result<Batch<T>> {
    if a.dim != w.cols {
        return Err(Error::DimensionMismatch {
            op: "matmul_transposed",
            expected: w.cols,
            found: a.dim,
        });
    }
    let mut out = Batch::zeros(a.batch_size, w.rows);
    T::gemm(
        a.batch_size,
        a.dim,
        w.rows,
        (&a.data, a.dim as isize, 1),
        (&w.data, 1, w.cols as isize),
        T::zero(),
        &mut out.data,
    );
    Ok(out)
}

/// `aᵀ · b`: accumulates weight gradients, `(batch, in)ᵀ × (batch, out) → (in, out)`.
pub fn outer_sum<T: Scalar>(a: &Batch<T>, b: &Batch<T>) -> Result<Matrix<T>> {
    if a.batch_size != b.batch_size {
        return Err(Error::DimensionMismatch {
            op: "outer_sum",
            expected: a.batch_size,
            found: b.batch_size,
        });
    }
    let mut out = Matrix::zeros(a.dim, b.dim);
    T::gemm(
        a.dim,
        a.batch_size,
        b.dim,
        (&a.data, 1, a.dim as isize),
        (&b.data, b.dim as isize, 1),
        T::zero(),
        &mut out.data,
    );
    Ok(out)
}

/// Exponential linear unit, `x` for `x > 0`, `alpha·(eˣ − 1)` otherwise.
#[inline]
pub fn elu_scalar<T: Scalar>(x: T, alpha: T) -> T {
    if x > T::zero() {
        x
    } else {
        alpha * (x.exp() - T::one())
    }
}

/// Derivative of [`elu_scalar`] expressed through its input.
#[inline]
pub fn elu_grad_scalar<T: Scalar>(x: T, alpha: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        alpha * x.exp()
    }
}

pub fn elu<T: Scalar>(x: &Batch<T>, alpha: T) -> Batch<T> {
    let mut out = x.clone();
    elu_in_place(&mut out, alpha);
    out
}

pub fn elu_in_place<T: Scalar>(x: &mut Batch<T>, alpha: T) {
    T::elu_slice(&mut x.data, alpha);
}

/// Numerically stable softmax. `-inf` entries map to exactly zero.
pub fn softmax<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place<T: Scalar>(x: &mut [T]) -> Result<()> {
    let max = x
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(T::neg_infinity(), Float::max);
    if !max.is_finite() {
        return Err(Error::AllMasked);
    }
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = if *v == T::neg_infinity() {
            T::zero()
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
    Ok(())
}
