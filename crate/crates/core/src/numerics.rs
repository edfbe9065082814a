//! Dense row-major `f32` matrices and the handful of kernels the model needs.
//!
//! Products accumulate in `f64` with a fixed lane layout, so results are
//! reproducible bit-for-bit on a given machine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(data: Vec<f32>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

fn check_finite(m: &Matrix, op: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

/// Dot product with `f64` accumulation over eight fixed lanes.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 8];
    let chunks = a.len() / 8;
    let (a_main, a_tail) = a.split_at(chunks * 8);
    let (b_main, b_tail) = b.split_at(chunks * 8);
    for (ca, cb) in a_main.chunks_exact(8).zip(b_main.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] as f64 * cb[l] as f64;
        }
    }
    for (l, (x, y)) in a_tail.iter().zip(b_tail).enumerate() {
        acc[l] += *x as f64 * *y as f64;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// `c ← op(a) · op(b) + beta · c`, where `op` transposes when the flag is set.
/// Shapes are checked by debug assertions only.
pub(crate) fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f32, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert!(k == kb && c.rows == m && c.cols == n, "gemm shape mismatch");
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides above describe exactly the `m×k`, `k×n` and `m×n`
    // views of the three buffers, whose lengths were asserted through the shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `a · bᵀ` without any checks beyond shape assertions.
pub(crate) fn matmul_nt_raw(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm(a, false, b, true, 0.0, &mut out);
    out
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(a, false, b, false, 0.0, &mut out);
    check_finite(&out, "matmul")?;
    Ok(out)
}

/// `a · bᵀ`, the natural layout for `y = W x` with row-major activations.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let out = matmul_nt_raw(a, b);
    check_finite(&out, "matmul_nt")?;
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Matrix) -> Result<Matrix> {
    check_finite(a, "softmax_rows")?;
    let mut out = a.clone();
    if out.cols == 0 {
        return Ok(out);
    }
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Normalizes `x` in place and returns `(1/sqrt(var + eps))`. Mean and
/// population variance are accumulated in `f64`.
pub(crate) fn normalize_in_place(x: &mut [f32], eps: f32) -> f32 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv_std = 1.0 / (var + eps as f64).sqrt();
    for v in x.iter_mut() {
        *v = ((*v as f64 - mean) * inv_std) as f32;
    }
    inv_std as f32
}

pub const DEFAULT_LN_EPS: f32 = 1e-12;

/// `(x - mean) / sqrt(var + eps) * gamma + beta` with population variance.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.is_empty() || gamma.len() != x.len() || beta.len() != x.len() {
        return Err(NumericsError::DimensionMismatch {
            op: "layer_norm",
            lhs: (1, x.len()),
            rhs: (gamma.len(), beta.len()),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(NumericsError::NonFinite { op: "layer_norm" });
    }
    let mut out = x.to_vec();
    normalize_in_place(&mut out, eps);
    for ((o, g), b) in out.iter_mut().zip(gamma).zip(beta) {
        *o = *o * g + b;
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(NumericsError::NonFinite { op: "layer_norm" });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    /// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Gelu => {
                let inner = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    /// Derivative with respect to the pre-activation input.
    #[inline]
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Gelu => {
                let x2 = x * x;
                let inner = GELU_C * (x + GELU_A * x2 * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x2)
            }
        }
    }
}

pub fn activation(x: &[f32], kind: ActivationKind) -> Vec<f32> {
    x.iter().map(|&v| kind.apply(v)).collect()
}
