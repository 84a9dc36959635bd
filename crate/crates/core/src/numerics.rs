//! Dense vector/matrix kernels, the seeded random stream and finite-difference helpers.

use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Flat vector of `f64` used for parameters, gradients and curvature pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    /// Checked constructor: rejects empty or non-finite input.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Degenerate("empty vector".into()));
        }
        if let Some(j) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite entry at index {j}")));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        axpy(&mut self.0, alpha, x);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sub(&self, other: &[f64]) -> DenseVector {
        debug_assert_eq!(self.len(), other.len());
        DenseVector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix by stacking equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Result<DenseVector> {
        if x.len() != self.cols {
            return Err(Error::dim(format!(
                "matvec: {} columns vs vector of {}",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect::<Vec<_>>().into())
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                axpy(out.row_mut(i), a, other.row(k));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Selects the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting. Small matrices only.
    pub fn inverse(&self) -> Result<DenseMatrix> {
        if self.rows != self.cols {
            return Err(Error::dim("inverse of a non-square matrix"));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = DenseMatrix::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&p, &q| a.get(p, col).abs().total_cmp(&a.get(q, col).abs()))
                .unwrap_or(col);
            let pv = a.get(pivot, col);
            if pv.abs() < 1e-300 || !pv.is_finite() {
                return Err(Error::Numeric("singular matrix".into()));
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(pivot * n + j, col * n + j);
                    inv.data.swap(pivot * n + j, col * n + j);
                }
            }
            let scale = 1.0 / pv;
            a.row_mut(col).iter_mut().for_each(|v| *v *= scale);
            inv.row_mut(col).iter_mut().for_each(|v| *v *= scale);
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a.get(r, col);
                if factor == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let av = a.get(col, j);
                    let iv = inv.get(col, j);
                    a.data[r * n + j] -= factor * av;
                    inv.data[r * n + j] -= factor * iv;
                }
            }
        }
        Ok(inv)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convex combination `sum_k w_k v_k / sum_k w_k`.
pub fn weighted_average<V: AsRef<[f64]>>(vectors: &[V], weights: &[f64]) -> Result<DenseVector> {
    if vectors.is_empty() {
        return Err(Error::Degenerate("no vectors to average".into()));
    }
    if vectors.len() != weights.len() {
        return Err(Error::dim(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    let d = vectors[0].as_ref().len();
    if let Some(k) = vectors.iter().position(|v| v.as_ref().len() != d) {
        return Err(Error::dim(format!(
            "vector {k} has length {}, expected {d}",
            vectors[k].as_ref().len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Degenerate("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("weights sum to zero".into()));
    }
    let mut out = DenseVector::zeros(d);
    for (v, w) in vectors.iter().zip(weights) {
        out.axpy(w / total, v.as_ref());
    }
    Ok(out)
}

/// Central-difference gradient of `f` at `w` with step `h`.
pub fn finite_difference_gradient<F>(f: F, w: &[f64], h: f64) -> Result<DenseVector>
where
    F: Fn(&[f64]) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Degenerate(format!("step must be positive, got {h}")));
    }
    let mut probe = w.to_vec();
    let mut grad = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        probe[j] = w[j] + h;
        let fp = f(&probe);
        probe[j] = w[j] - h;
        let fm = f(&probe);
        probe[j] = w[j];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite when probing coordinate {j}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad.into())
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Largest coordinate-wise [`rel_err`]; infinite on length mismatch.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Identity of a random stream: a base seed plus an independent stream selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSeed {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngSeed {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn stream(self) -> SeededStream {
        seeded_stream(self)
    }
}

/// Stream ids reserved for the distinct consumers of one experiment seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SHARING: u64 = 3;
    pub const INIT: u64 = 4;
    pub const CLIENT_SAMPLING: u64 = 5;
    pub const TEST_DATA: u64 = 6;
    pub const SYNTH_TRUTH: u64 = 7;
    /// Client `k` draws from stream `CLIENT_BASE + k`.
    pub const CLIENT_BASE: u64 = 1 << 32;
}

/// ChaCha8 keyed by `seed`, with `stream_id` selecting the ChaCha stream.
#[derive(Debug, Clone)]
pub struct SeededStream {
    rng: ChaCha8Rng,
}

pub fn seeded_stream(seed: RngSeed) -> SeededStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.seed);
    rng.set_stream(seed.stream_id);
    SeededStream { rng }
}

impl SeededStream {
    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `k` distinct indices from `[0, n)`, in sampled order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec()
    }

    /// Index drawn from an unnormalized discrete distribution.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        // roundoff lands past the end
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

impl RngCore for SeededStream {
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
