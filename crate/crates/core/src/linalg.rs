//! Dense vectors and matrices, the error function, and seeded random streams.
//!
//! Vectors are plain `[f64]` slices; the helpers here only add dimension
//! checking on top of iterator arithmetic.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `out = self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Frobenius norm, i.e. the l2 norm of the flattened matrix.
    pub fn frobenius_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    /// Select a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Unchecked dot product; callers guarantee equal lengths.
#[inline]
pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn inner(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dim(u.len(), v.len())?;
    Ok(dot(u, v))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    let s: f64 = v.iter().map(|x| x * x).sum();
    if s.is_finite() && s > 1e-280 {
        return s.sqrt();
    }
    // scaled accumulation when the plain sum of squares over- or underflows
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 || !max.is_finite() {
        return max;
    }
    let inv = 1.0 / max;
    let s: f64 = v.iter().map(|x| (x * inv) * (x * inv)).sum();
    max * s.sqrt()
}

/// `y += a · x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) -> Result<()> {
    check_dim(y.len(), x.len())?;
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
    Ok(())
}

pub fn scale(a: f64, v: &mut [f64]) {
    for x in v {
        *x *= a;
    }
}

/// Rescale `v` so that `||v||_2 <= bound`; no-op (bit for bit) when it already
/// holds. Returns the norm before clipping.
///
/// Rounding can leave the rescaled norm a few ulps above `bound`; the loop
/// shrinks it until the bound holds exactly so that clipping is idempotent.
pub fn clip_norm(v: &mut [f64], bound: f64) -> f64 {
    let norm = l2_norm(v);
    if norm > bound {
        scale(bound / norm, v);
        while l2_norm(v) > bound {
            scale(1.0 - f64::EPSILON, v);
        }
    }
    norm
}

pub fn add(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim(u.len(), v.len())?;
    Ok(u.iter().zip(v).map(|(a, b)| a + b).collect())
}

pub fn sub(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim(u.len(), v.len())?;
    Ok(u.iter().zip(v).map(|(a, b)| a - b).collect())
}

/// Error function. Evaluated on `|x|` with the sign restored afterwards, so
/// `erf(-x) == -erf(x)` holds bit for bit.
pub fn erf(x: f64) -> f64 {
    let r = libm::erf(x.abs());
    if x.is_sign_negative() {
        -r
    } else {
        r
    }
}

/// Complementary error function with full relative precision in the tail.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `ln(erfc(x))`, accurate for large positive `x` where `erfc` underflows.
pub fn ln_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return libm::erfc(x).ln();
    }
    // Asymptotic expansion: erfc(x) ~ exp(-x²)/(x√π) · (1 - 1/(2x²) + 3/(4x⁴) - 15/(8x⁶))
    let x2 = x * x;
    let series = 1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Two streams with the same pair produce identical sequences; distinct
/// stream ids are statistically independent (ChaCha stream separation).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `n` i.i.d. draws from N(mean, std²).
pub fn gaussian(rng: &mut RngStream, mean: f64, std: f64, n: usize) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid("std", format!("must be finite and >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(vec![mean; n]);
    }
    Ok((0..n).map(|_| mean + std * rng.standard_normal()).collect())
}

/// `n` i.i.d. draws from Laplace(0, scale), by inverse-CDF sampling.
pub fn laplace(rng: &mut RngStream, scale: f64, n: usize) -> Result<Vec<f64>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid("scale", format!("must be finite and > 0, got {scale}")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = rng.uniform() - 0.5;
        if u == -0.5 {
            continue;
        }
        out.push(-scale * u.signum() * (1.0 - 2.0 * u.abs()).ln());
    }
    Ok(out)
}
