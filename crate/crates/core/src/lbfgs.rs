//! Fisher-diagonal curvature, bounded L-BFGS memory and the two-loop recursion.
//!
//! Clients estimate the diagonal of the empirical Fisher matrix from their
//! per-sample gradients. The server averages those diagonals, uses the result
//! to turn each step `s` into a curvature vector `y = F s`, and keeps the last
//! `m` accepted `(s, y)` pairs to build quasi-Newton directions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::PerSampleGradients;
use crate::numerics::{dot, DenseMatrix, DenseVector};

/// Diagonal of the empirical Fisher matrix over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FimDiagonal {
    pub diag: DenseVector,
    pub batch_size: usize,
}

impl FimDiagonal {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn max_entry(&self) -> f64 {
        self.diag.iter().copied().fold(0.0, f64::max)
    }
}

/// One stored curvature pair with its cached `rho = 1 / y's`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: DenseVector,
    pub y: DenseVector,
    pub rho: f64,
}

impl CurvaturePair {
    pub fn new(s: DenseVector, y: DenseVector) -> Result<Self> {
        if s.len() != y.len() {
            return Err(Error::dim(format!("s has {} entries, y has {}", s.len(), y.len())));
        }
        let ys = dot(&y, &s);
        if !(ys > 0.0) || !ys.is_finite() {
            return Err(Error::Numeric(format!("curvature y's = {ys} is not positive")));
        }
        Ok(Self { s, y, rho: 1.0 / ys })
    }

    pub fn ys(&self) -> f64 {
        dot(&self.y, &self.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum H0Mode {
    Identity,
    GammaScaled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub m: usize,
    pub cautious_eps: f64,
    pub h0_mode: H0Mode,
    pub fim_damping: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            m: 10,
            cautious_eps: 1e-8,
            h0_mode: H0Mode::GammaScaled,
            fim_damping: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config("round.learning_rate", "must be positive and finite"));
        }
        if self.m == 0 {
            return Err(Error::config("lbfgs.m", "memory size must be at least 1"));
        }
        if !(self.cautious_eps > 0.0) {
            return Err(Error::config("lbfgs.cautious_eps", "must be positive"));
        }
        if !(self.fim_damping >= 0.0) || !self.fim_damping.is_finite() {
            return Err(Error::config("lbfgs.fim_damping", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Outcome of offering a pair to the memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStatus {
    Stored,
    /// Stored after discarding the oldest pair.
    StoredEvicted,
    /// Rejected by the cautious test `y's >= eps * |s|^2`.
    Skipped,
}

/// Bounded FIFO of curvature pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsMemory {
    pairs: VecDeque<CurvaturePair>,
    capacity: usize,
    h0_mode: H0Mode,
    h0_scale: f64,
    skips: usize,
}

impl LbfgsMemory {
    pub fn new(capacity: usize, h0_mode: H0Mode) -> Self {
        assert!(capacity >= 1, "L-BFGS memory needs room for one pair");
        Self {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
            h0_mode,
            h0_scale: 1.0,
            skips: 0,
        }
    }

    pub fn pairs(&self) -> impl ExactSizeIterator<Item = &CurvaturePair> + DoubleEndedIterator {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Scale of the initial inverse Hessian `H0 = h0_scale * I`.
    pub fn h0_scale(&self) -> f64 {
        self.h0_scale
    }

    pub fn skips(&self) -> usize {
        self.skips
    }

    /// Smallest and largest `|y|^2 / y's` among stored pairs.
    pub fn curvature_range(&self) -> Option<(f64, f64)> {
        self.pairs
            .iter()
            .map(|p| curvature_ratio(p).unwrap_or(f64::NAN))
            .fold(None, |acc, r| match acc {
                None => Some((r, r)),
                Some((lo, hi)) => Some((lo.min(r), hi.max(r))),
            })
    }

    fn refresh_h0(&mut self) {
        self.h0_scale = match (self.h0_mode, self.pairs.back()) {
            (H0Mode::GammaScaled, Some(p)) => p.ys() / dot(&p.y, &p.y),
            _ => 1.0,
        };
    }
}

/// `diag_j = mean_i g[i,j]^2 + damping`.
pub fn fim_diagonal(grads: &PerSampleGradients, damping: f64) -> Result<FimDiagonal> {
    let b = grads.batch_size();
    if b == 0 {
        return Err(Error::Degenerate("Fisher diagonal of an empty batch".into()));
    }
    let mut diag = vec![0.0; grads.dim()];
    for i in 0..b {
        for (acc, g) in diag.iter_mut().zip(grads.grads.row(i)) {
            *acc += g * g;
        }
    }
    let inv = 1.0 / b as f64;
    diag.iter_mut().for_each(|v| *v = *v * inv + damping);
    Ok(FimDiagonal {
        diag: diag.into(),
        batch_size: b,
    })
}

/// Unweighted mean of the client diagonals; `batch_size` is summed.
pub fn aggregate_fim(parts: &[FimDiagonal]) -> Result<FimDiagonal> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Degenerate("no Fisher diagonals to aggregate".into()))?;
    let d = first.len();
    let mut diag = DenseVector::zeros(d);
    for (k, p) in parts.iter().enumerate() {
        if p.len() != d {
            return Err(Error::dim(format!("part {k} has length {}, expected {d}", p.len())));
        }
        diag.axpy(1.0, &p.diag);
    }
    diag.scale(1.0 / parts.len() as f64);
    Ok(FimDiagonal {
        diag,
        batch_size: parts.iter().map(|p| p.batch_size).sum(),
    })
}

/// `y = diag(F) s`.
pub fn smooth_y(fim: &FimDiagonal, s: &[f64]) -> Result<DenseVector> {
    if fim.len() != s.len() {
        return Err(Error::dim(format!(
            "Fisher diagonal has {} entries, step has {}",
            fim.len(),
            s.len()
        )));
    }
    Ok(fim.diag.iter().zip(s).map(|(f, sj)| f * sj).collect::<Vec<_>>().into())
}

/// Offers `(s, y)` to the memory. Pairs failing `y's >= eps |s|^2` are skipped
/// and counted; accepted pairs evict the oldest once the memory is full.
pub fn update_memory(mem: &mut LbfgsMemory, s: DenseVector, y: DenseVector, cautious_eps: f64) -> Result<UpdateStatus> {
    if s.len() != y.len() {
        return Err(Error::dim(format!("s has {} entries, y has {}", s.len(), y.len())));
    }
    if let Some(p) = mem.pairs.back() {
        if p.s.len() != s.len() {
            return Err(Error::dim("pair length differs from stored pairs"));
        }
    }
    let ys = dot(&y, &s);
    let ss = dot(&s, &s);
    if !(ys >= cautious_eps * ss) || !(ys > 0.0) || !ys.is_finite() {
        mem.skips += 1;
        return Ok(UpdateStatus::Skipped);
    }
    let evicted = if mem.pairs.len() == mem.capacity {
        mem.pairs.pop_front();
        true
    } else {
        false
    };
    mem.pairs.push_back(CurvaturePair { s, y, rho: 1.0 / ys });
    mem.refresh_h0();
    Ok(if evicted {
        UpdateStatus::StoredEvicted
    } else {
        UpdateStatus::Stored
    })
}

/// Quasi-Newton direction `p = -H g` by the two-loop recursion.
pub fn two_loop_direction(mem: &LbfgsMemory, g: &[f64]) -> Result<DenseVector> {
    if let Some(p) = mem.pairs.back() {
        if p.s.len() != g.len() {
            return Err(Error::dim(format!(
                "gradient has {} entries, stored pairs have {}",
                g.len(),
                p.s.len()
            )));
        }
    }
    let mut q = DenseVector::from(g.to_vec());
    let mut alpha = vec![0.0; mem.len()];
    for (i, p) in mem.pairs.iter().enumerate().rev() {
        alpha[i] = p.rho * dot(&p.s, &q);
        q.axpy(-alpha[i], &p.y);
    }
    q.scale(mem.h0_scale);
    for (i, p) in mem.pairs.iter().enumerate() {
        let beta = p.rho * dot(&p.y, &q);
        q.axpy(alpha[i] - beta, &p.s);
    }
    q.scale(-1.0);
    Ok(q)
}

/// Explicit inverse-Hessian approximation for small `d`.
///
/// Starts from `B0 = I / h0_scale`, applies the direct BFGS update
/// `B <- B - B s s' B / (s' B s) + y y' / (y' s)` for every stored pair from
/// oldest to newest, and returns `B^-1`.
pub fn dense_bfgs_oracle(mem: &LbfgsMemory, d: usize) -> Result<DenseMatrix> {
    let mut b = DenseMatrix::identity(d);
    let inv_h0 = 1.0 / mem.h0_scale;
    for i in 0..d {
        b.set(i, i, inv_h0);
    }
    for p in &mem.pairs {
        if p.s.len() != d {
            return Err(Error::dim("pair length differs from oracle dimension"));
        }
        let ys = p.ys();
        if !(ys > 0.0) {
            return Err(Error::Numeric(format!("non-positive curvature pair (y's = {ys})")));
        }
        let bs = b.matvec(&p.s)?;
        let sbs = dot(&p.s, &bs);
        let mut next = b.clone();
        for r in 0..d {
            for c in 0..d {
                let v = b.get(r, c) - bs[r] * bs[c] / sbs + p.y[r] * p.y[c] / ys;
                next.set(r, c, v);
            }
        }
        b = next;
    }
    b.inverse()
}

/// `|y|^2 / y's` for a stored pair.
pub fn curvature_ratio(pair: &CurvaturePair) -> Result<f64> {
    let ys = pair.ys();
    if !(ys > 0.0) {
        return Err(Error::Numeric(format!("curvature ratio undefined for y's = {ys}")));
    }
    Ok(dot(&pair.y, &pair.y) / ys)
}
