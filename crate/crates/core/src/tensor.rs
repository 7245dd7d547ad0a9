//! Dense row-major f32 tensors and the handful of kernels the rest of the
//! crate is built from.
//!
//! Every operation here is a pure function of its inputs. Reductions are
//! carried out in f32 with a fixed association order, so results are
//! bit-for-bit reproducible across runs and thread counts.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// A `rows × cols` matrix. Panics if the data length is wrong; use
    /// [`Tensor::new`] for untrusted input.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the innermost dimension (1 for a scalar-shaped tensor).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows × last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.last_dim();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Inner product with eight interleaved f32 accumulators.
///
/// The lane split is fixed, which keeps the result deterministic while
/// letting the compiler vectorize the loop.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let (ca, ra) = a.as_chunks::<8>();
    let (cb, rb) = b.as_chunks::<8>();
    let mut acc = [0.0f32; 8];
    for (x, y) in ca.iter().zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    reduce_lanes(&acc, tail)
}

#[inline(always)]
fn reduce_lanes(acc: &[f32; 8], tail: f32) -> f32 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked.
        unsafe { avx2::axpy(alpha, x, y) };
        return;
    }
    axpy_portable(alpha, x, y);
}

#[inline(always)]
fn axpy_portable(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a.data[i * k + p], &b.data[p * n..(p + 1) * n], orow);
        }
    }
    Tensor::matrix(m, n, out).check_finite("matmul")
}

/// `a[m×k] · w[n×k]ᵀ`, the layout used by every linear layer in this crate
/// (weights stored `[out_features × in_features]`).
pub fn matmul_transposed(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul_transposed")?;
    let (n, k2) = as_matrix(w, "matmul_transposed")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_transposed",
            lhs: a.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        linear_row(
            &a.data[i * k..(i + 1) * k],
            &w.data,
            &mut out[i * n..(i + 1) * n],
        );
    }
    Tensor::matrix(m, n, out).check_finite("matmul_transposed")
}

/// One row of `x · wᵀ` where `w` is `[out.len() × x.len()]` row-major.
/// Each output is bitwise equal to [`dot`] of `x` with its weight row.
#[inline]
pub fn linear_row(x: &[f32], w: &[f32], out: &mut [f32]) {
    assert!(
        w.len() >= out.len() * x.len(),
        "linear_row: weight too short"
    );
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked; `w` covers every row read.
        unsafe { avx2::linear_row(x, w, out) };
        return;
    }
    linear_rows_from(x, w, out, 0);
}

#[inline]
fn linear_rows_from(x: &[f32], w: &[f32], out: &mut [f32], first: usize) {
    let k = x.len();
    for (r, o) in out.iter_mut().enumerate().skip(first) {
        *o = dot(x, &w[r * k..(r + 1) * k]);
    }
}

/// AVX2 versions of the hot kernels. They perform the same per-lane f32
/// multiplies and adds in the same order as the portable code (no fused
/// multiply-add), so results are identical bit for bit.
#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::{axpy_portable, linear_rows_from, reduce_lanes};

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
        axpy_portable(alpha, x, y);
    }

    /// Four weight rows per pass over `x`, one 8-lane accumulator each.
    ///
    /// Caller guarantees AVX2 and `w.len() >= out.len() * x.len()`.
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn linear_row(x: &[f32], w: &[f32], out: &mut [f32]) {
        let k = x.len();
        let full = k / 8 * 8;
        let xp = x.as_ptr();
        let mut r = 0;
        while r + 4 <= out.len() {
            let wp = w.as_ptr().add(r * k);
            let mut acc = [_mm256_setzero_ps(); 4];
            let mut c = 0;
            while c < full {
                let xv = _mm256_loadu_ps(xp.add(c));
                for (j, a) in acc.iter_mut().enumerate() {
                    let wv = _mm256_loadu_ps(wp.add(j * k + c));
                    *a = _mm256_add_ps(*a, _mm256_mul_ps(xv, wv));
                }
                c += 8;
            }
            for (j, a) in acc.iter().enumerate() {
                let mut lanes = [0.0f32; 8];
                _mm256_storeu_ps(lanes.as_mut_ptr(), *a);
                let row = &w[(r + j) * k..(r + j + 1) * k];
                let mut tail = 0.0f32;
                for (xi, wi) in x[full..].iter().zip(&row[full..]) {
                    tail += xi * wi;
                }
                out[r + j] = reduce_lanes(&lanes, tail);
            }
            r += 4;
        }
        linear_rows_from(x, w, out, r);
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Reciprocal root-mean-square scale for one row.
#[inline]
pub fn rms_scale(x: &[f32], eps: f32) -> f32 {
    let ms = dot(x, x) / x.len() as f32;
    1.0 / (ms + eps).sqrt()
}

/// RMS-normalize `x` into `out`, optionally multiplying by `gain`.
#[inline]
pub fn rmsnorm_row(x: &[f32], gain: Option<&[f32]>, eps: f32, out: &mut [f32]) {
    let inv = rms_scale(x, eps);
    match gain {
        Some(g) => {
            for ((o, &v), &gi) in out.iter_mut().zip(x).zip(g) {
                *o = v * inv * gi;
            }
        }
        None => {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = v * inv;
            }
        }
    }
}

/// Row-wise RMSNorm over the last dimension. A zero row maps to a zero row
/// as long as `eps > 0`.
pub fn rmsnorm(h: &Tensor, gain: Option<&Tensor>, eps: f32) -> Result<Tensor> {
    let d = h.last_dim();
    if let Some(g) = gain {
        if g.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm",
                lhs: h.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
    }
    let mut out = Tensor::zeros(h.shape.clone());
    if d > 0 {
        for (src, dst) in h.data.chunks_exact(d).zip(out.data.chunks_exact_mut(d)) {
            rmsnorm_row(src, gain.map(|g| g.data()), eps, dst);
        }
    }
    out.check_finite("rmsnorm")
}

/// Logistic function, evaluated in the branch that never exponentiates a
/// positive argument. The intermediate is f64 so that the f32 result is
/// correctly rounded and `σ(x) + σ(-x)` stays within one rounding of 1.
#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    let x = x as f64;
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s as f32
}

/// `x·σ(x)` in plain f32; `x / (1 + e^-x)` is already well behaved at
/// both tails.
#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// d/dx of `x·σ(x)`.
#[inline]
pub fn silu_grad_scalar(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    let d = out.last_dim();
    if d > 0 {
        for row in out.data.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
    }
    out.check_finite("softmax")
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// Returns [`TensorError::ZeroNorm`] if either vector is all zeros; callers
/// decide what that means.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TensorError::ZeroNorm);
    }
    let c = dot(a, b) / (na * nb);
    if !c.is_finite() {
        return Err(TensorError::NonFinite {
            op: "cosine_similarity",
        });
    }
    Ok(c.clamp(-1.0, 1.0))
}
