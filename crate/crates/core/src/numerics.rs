//! Dense row-major matrices, the affine and ReLU layers with their backward
//! passes, a seeded RNG, and the central-difference gradient checker.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos} is {}", values[pos])));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("matrix", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut SeededRng) -> Self {
        let values = (0..rows * cols)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self { rows, cols, values }
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }
}

/// `C = A * B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out = &mut c.values[i * b.cols..(i + 1) * b.cols];
        for (j, &aij) in a.row(i).iter().enumerate() {
            if aij == 0.0 {
                continue;
            }
            for (o, &bjk) in out.iter_mut().zip(b.row(j)) {
                *o += aij * bjk;
            }
        }
    }
    Ok(c)
}

/// `C = A^T * B`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})^T * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let brow = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            for (o, &bv) in c.row_mut(i).iter_mut().zip(brow) {
                *o += ari * bv;
            }
        }
    }
    Ok(c)
}

/// `C = A * B^T`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} * ({}x{})^T", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for k in 0..b.rows {
            let dot: f64 = arow.iter().zip(b.row(k)).map(|(x, y)| x * y).sum();
            c.values[i * b.rows + k] = dot;
        }
    }
    Ok(c)
}

/// Gradients returned by [`affine_backward`].
#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub dbias: Vec<f64>,
}

/// `Y = X * W + bias`, bias broadcast over rows.
pub fn affine_forward(x: &Matrix, w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != w.cols {
        return Err(Error::shape(
            "affine",
            format!("bias length {} for {} outputs", bias.len(), w.cols),
        ));
    }
    let mut y = matmul(x, w)?;
    for i in 0..y.rows {
        for (v, b) in y.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

pub fn affine_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<AffineGrads> {
    if dy.rows != x.rows || dy.cols != w.cols {
        return Err(Error::shape(
            "affine_backward",
            format!(
                "dY {}x{} for X {}x{}, W {}x{}",
                dy.rows, dy.cols, x.rows, x.cols, w.rows, w.cols
            ),
        ));
    }
    let dx = matmul_nt(dy, w)?;
    let dw = matmul_tn(x, dy)?;
    let mut dbias = vec![0.0; dy.cols];
    for i in 0..dy.rows {
        for (d, v) in dbias.iter_mut().zip(dy.row(i)) {
            *d += v;
        }
    }
    Ok(AffineGrads { dx, dw, dbias })
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        values: x.values.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Subgradient at zero is zero.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if x.shape() != dy.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", x.shape(), dy.shape()),
        ));
    }
    Ok(Matrix {
        rows: x.rows,
        cols: x.cols,
        values: x
            .values
            .iter()
            .zip(&dy.values)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate.
pub fn central_differences<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(x+eps)={hi}, f(x-eps)={lo}"
            )));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Max over coordinates of `|fd - analytic| / max(1e-8, |fd| + |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{} coordinates, {} analytic entries", x.len(), analytic.len()),
        ));
    }
    let fd = central_differences(f, x, eps)?;
    Ok(fd
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| (n - a).abs() / (n.abs() + a.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

/// Deterministic, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// An independent stream keyed by `(seed, stream)`.
    pub fn for_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.0.random::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    /// `k` distinct indices from `0..n` in sampling order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.0, n, k.min(n)).into_vec()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
