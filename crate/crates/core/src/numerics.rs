//! Deterministic math kernel shared by every stage of the pipeline.
//!
//! Everything here is reproducible bit-for-bit: the random streams use
//! SplitMix64 + Box–Muller and transcendental functions go through `libm`
//! so fixtures do not depend on the platform's C math library.

use crate::error::{PdiError, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl RealMatrix {
    /// Builds a matrix, rejecting mismatched lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(PdiError::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self { rows, cols, values })
    }

    /// Internal constructor for values produced by finite arithmetic on
    /// already-validated operands.
    pub(crate) fn from_raw(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, values.len());
        Self { rows, cols, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimensions");
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Self::from_raw(self.rows, rhs.cols, out)
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_t inner dimensions");
        let mut out = Vec::with_capacity(self.rows * rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.push(dot(a, rhs.row(j)));
            }
        }
        Self::from_raw(self.rows, rhs.rows, out)
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "t_matmul inner dimensions");
        let mut out = vec![0.0; self.cols * rhs.cols];
        for k in 0..self.rows {
            let b = rhs.row(k);
            for i in 0..self.cols {
                let a = self.values[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                for (o, bv) in out[i * rhs.cols..(i + 1) * rhs.cols].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Self::from_raw(self.cols, rhs.cols, out)
    }

    pub fn add_assign(&mut self, rhs: &Self) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, b) in self.values.iter_mut().zip(&rhs.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.scale(s);
        self
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        (0..self.rows).all(|r| {
            let row = self.row(r);
            row.iter().all(|&v| v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(PdiError::NumericInput { index }),
        None => Ok(()),
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &RealMatrix) -> Result<RealMatrix> {
    check_finite(m.values())?;
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(&mut out.values[r * m.cols..(r + 1) * m.cols]);
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward pass of a row softmax: given `p = softmax(s)` and `dL/dp`,
/// returns `dL/ds`.
pub(crate) fn softmax_rows_backward(p: &RealMatrix, grad_p: &RealMatrix) -> RealMatrix {
    let mut out = Vec::with_capacity(p.values.len());
    for r in 0..p.rows {
        let pr = p.row(r);
        let gr = grad_p.row(r);
        let inner = dot(pr, gr);
        out.extend(pr.iter().zip(gr).map(|(pv, gv)| pv * (gv - inner)));
    }
    RealMatrix::from_raw(p.rows, p.cols, out)
}

/// SplitMix64 output function applied to an explicit state.
#[inline]
fn splitmix64(state: u64) -> u64 {
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 stream: value `k` depends only on `(seed, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededStream {
    seed: u64,
    position: u64,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position += 1;
        splitmix64(
            self.seed
                .wrapping_add(self.position.wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    /// Uniform in the half-open interval (0, 1].
    pub fn next_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound`.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        // bias is below 2^-40 for every bound used here
        self.next_u64() % bound
    }
}

/// Draws `n` standard-normal values. Values are produced in Box–Muller
/// pairs, so a shorter draw is always a prefix of a longer one.
pub fn seeded_gaussian(stream: &mut SeededStream, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1 = stream.next_unit();
        let u2 = stream.next_unit();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        out.push(radius * libm::cos(angle));
        out.push(radius * libm::sin(angle));
    }
    out.truncate(n);
    out
}

/// 64-bit FNV-1a over the UTF-8 bytes of `text`.
pub fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Hash-seeded unit vector standing in for a text-encoder embedding.
pub fn token_embedding(token: &str, dim: usize) -> Result<Vec<f64>> {
    if token.is_empty() {
        return Err(PdiError::ParseInput("empty token".into()));
    }
    if dim < 2 {
        return Err(PdiError::config(format!("embedding dim must be >= 2, got {dim}")));
    }
    let mut stream = SeededStream::new(fnv1a(token));
    let mut v = seeded_gaussian(&mut stream, dim);
    let norm = libm::sqrt(dot(&v, &v));
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}
