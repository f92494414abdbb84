//! Dense row-major `f32` tensors and the handful of kernels the models need.
//!
//! Storage is 32-bit; every reduction (matmul inner products, normalization
//! moments, softmax sums) accumulates in 64-bit. Slicing always copies.

use crate::error::{Result, VbpError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(VbpError::Usage(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(VbpError::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized dimension in {shape:?}");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(VbpError::dim("Tensor::from_rows", &[cols], &[bad.len()]));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn num_rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(VbpError::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|x| x * s)
    }

    /// Copies the selected rows (first axis) of a 1-D or 2-D tensor.
    pub fn select_rows(&self, keep: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(keep.len() * inner);
        for &r in keep {
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = keep.len();
        Tensor { shape, data }
    }

    /// Copies the selected columns of a 2-D tensor.
    pub fn select_cols(&self, keep: &[usize]) -> Tensor {
        assert_eq!(self.shape.len(), 2, "select_cols needs a matrix");
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(rows * keep.len());
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            data.extend(keep.iter().map(|&c| row[c]));
        }
        Tensor {
            shape: vec![rows, keep.len()],
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(VbpError::dim(op, other, &[0, 0])),
    }
}

/// `c = a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(VbpError::dim("matmul", a.shape(), b.shape()));
    }
    let a64 = widen(a.data());
    let b64 = widen(b.data());
    let mut c = vec![0.0f64; m * n];
    gemm(
        m, k, n, 1.0,
        &a64, k as isize, 1,
        &b64, n as isize, 1,
        0.0, &mut c, n as isize, 1,
    );
    Tensor::new(vec![m, n], narrow(&c))
}

/// `y = x · wᵀ + bias` for `x: [rows, in]`, `w: [out, in]`, `bias: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (out, inp) = as_matrix(w, "linear")?;
    let x_in = x.last_dim();
    if x_in != inp {
        return Err(VbpError::dim("linear", x.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if b.numel() != out {
            return Err(VbpError::dim("linear bias", w.shape(), b.shape()));
        }
    }
    let rows = x.num_rows();
    let x64 = widen(x.data());
    let w64 = widen(w.data());
    let mut y = vec![0.0f64; rows * out];
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(out) {
            for (y, &b) in row.iter_mut().zip(b.data()) {
                *y = b as f64;
            }
        }
    }
    gemm(
        rows, inp, out, 1.0,
        &x64, inp as isize, 1,
        &w64, 1, inp as isize,
        1.0, &mut y, out as isize, 1,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Tensor::new(shape, narrow(&y))
}

pub(crate) fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub(crate) fn narrow(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Strided `c = alpha·a·b + beta·c` over `f64` slices.
///
/// Bounds are checked up front so the unsafe kernel call never reads or
/// writes outside the given slices.
#[allow(clippy::too_many_arguments)]
#[rustfmt::skip]
pub(crate) fn gemm(
    m: usize, k: usize, n: usize, alpha: f64,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    beta: f64, c: &mut [f64], rsc: isize, csc: isize,
) {
    fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
        assert!(rs >= 0 && cs >= 0, "negative strides unsupported");
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents verified above; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta, c.as_mut_ptr(), rsc, csc,
        );
    }
}

const GELU_COEF: f64 = 0.044_715;
// sqrt(2/pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximation GELU, `0.5·x·(1 + tanh(z))` with
/// `z = √(2/π)·(x + 0.044715·x³)`, evaluated as `x·σ(2z)` so the negative
/// tail keeps its sign instead of cancelling to zero.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * sigmoid2(inner(x))
}

/// Derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid2(inner(x));
    s + x * 2.0 * s * (1.0 - s) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[inline]
fn inner(x: f64) -> f64 {
    SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)
}

/// `σ(2z) = (1 + tanh z) / 2`.
#[inline]
fn sigmoid2(z: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * z).exp())
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| gelu_scalar(v as f64) as f32)
}

/// Row-wise layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.numel() != d || bias.numel() != d {
        return Err(VbpError::dim("layer_norm", x.shape(), gain.shape()));
    }
    if eps <= 0.0 {
        return Err(VbpError::Usage(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps as f64).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (((*v as f64 - mean) * rstd) * g as f64 + b as f64) as f32;
        }
    }
    Ok(out)
}

/// Row-wise softmax over the last dimension, max-subtracted.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_row_in_place(row);
    }
    out
}

pub(crate) fn softmax_row_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}
