//! Per-example gradient surrogates and the distance oracle built on them.
//!
//! The clustering space is the gradient of the cross-entropy loss with
//! respect to the input of the last layer. For a softmax output that is the
//! residual `softmax(logits) - onehot(label)` (dimension `C`). The richer
//! `last_layer_full` mode returns the exact gradient of the last layer's
//! weights and bias, `residual ⊗ [embedding; 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, l2_distance, norm, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyMode {
    #[default]
    ClassResidual,
    LastLayerFull,
}

impl ProxyMode {
    /// Proxy width for `classes` outputs and penultimate width `embedding`.
    pub fn dim(self, classes: usize, embedding: usize) -> usize {
        match self {
            ProxyMode::ClassResidual => classes,
            ProxyMode::LastLayerFull => classes * (embedding + 1),
        }
    }
}

/// Dense row-major `n × d` matrix of per-example proxies. Entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyMatrix<T> {
    n: usize,
    d: usize,
    data: Vec<T>,
}

impl<T: Real> ProxyMatrix<T> {
    pub fn new(n: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::invalid(format!("proxy buffer has {} values, expected {n}×{d}", data.len())));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite proxy entry at row {}, column {}",
                pos / d.max(1),
                pos % d.max(1)
            )));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("proxy rows have unequal lengths"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    /// Widens (or narrows) every entry into another scalar type.
    pub fn cast<U: Real>(&self) -> Result<ProxyMatrix<U>> {
        let data = self.data.iter().map(|x| U::from_f64(x.to_f64_lossy()).unwrap_or_else(U::nan)).collect();
        ProxyMatrix::new(self.n, self.d, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Rescales every nonzero row to unit L2 norm. Zero rows stay zero.
    pub fn normalize_rows(&mut self) {
        let d = self.d;
        if d == 0 {
            return;
        }
        for row in self.data.chunks_mut(d) {
            let n = norm(row);
            if n > T::zero() {
                row.iter_mut().for_each(|x| *x = *x / n);
            }
        }
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            if r >= self.n {
                return Err(Error::invalid(format!("row {r} out of range (n = {})", self.n)));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Self { n: rows.len(), d: self.d, data })
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `label` under `logits`, via log-sum-exp.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    lse - logits[label]
}

fn check_logits<T: Real>(logits: &[T], label: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if !all_finite(logits) {
        return Err(Error::invalid("logits contain non-finite values"));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    Ok(())
}

/// `softmax(logits) - onehot(label)`: the loss gradient w.r.t. the logits.
pub fn class_residual_proxy<T: Real>(logits: &[T], label: usize) -> Result<Vec<T>> {
    check_logits(logits, label)?;
    let mut r = softmax(logits);
    r[label] = r[label] - T::one();
    Ok(r)
}

/// Exact cross-entropy gradient w.r.t. last-layer weights (row-major
/// `C × E`) followed by the bias block (`C`).
pub fn last_layer_full_proxy<T: Real>(embedding: &[T], logits: &[T], label: usize) -> Result<Vec<T>> {
    if embedding.is_empty() {
        return Err(Error::invalid("embedding must be nonempty"));
    }
    if !all_finite(embedding) {
        return Err(Error::invalid("embedding contains non-finite values"));
    }
    let r = class_residual_proxy(logits, label)?;
    Ok(outer_with_bias(&r, embedding))
}

pub(crate) fn outer_with_bias<T: Real>(residual: &[T], embedding: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(residual.len() * (embedding.len() + 1));
    for &rc in residual {
        out.extend(embedding.iter().map(|&h| rc * h));
    }
    out.extend_from_slice(residual);
    out
}

/// Euclidean distance between two proxy rows.
pub fn pairwise_distance<T: Real>(proxies: &ProxyMatrix<T>, i: usize, j: usize) -> Result<T> {
    let n = proxies.rows();
    if i >= n || j >= n {
        return Err(Error::invalid(format!("index pair ({i}, {j}) out of range (n = {n})")));
    }
    Ok(row_distance(proxies, i, j))
}

#[inline]
fn row_distance<T: Real>(proxies: &ProxyMatrix<T>, i: usize, j: usize) -> T {
    if i == j {
        return T::zero();
    }
    l2_distance(proxies.row(i), proxies.row(j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    FullMatrix,
    OnDemand,
}

/// Read-only L2 distance oracle over the rows of a [`ProxyMatrix`].
///
/// Both cache policies go through the same row-distance routine, so cached
/// and on-demand answers agree bit-for-bit.
#[derive(Debug, Clone)]
pub struct DistanceOracle<'a, T> {
    proxies: &'a ProxyMatrix<T>,
    cache: Option<Vec<T>>,
}

impl<'a, T: Real> DistanceOracle<'a, T> {
    pub fn new(proxies: &'a ProxyMatrix<T>, policy: CachePolicy) -> Self {
        let cache = match policy {
            CachePolicy::OnDemand => None,
            CachePolicy::FullMatrix => {
                let n = proxies.rows();
                let mut m = vec![T::zero(); n * n];
                for i in 0..n {
                    for j in (i + 1)..n {
                        let d = row_distance(proxies, i, j);
                        m[i * n + j] = d;
                        m[j * n + i] = d;
                    }
                }
                Some(m)
            }
        };
        Self { proxies, cache }
    }

    /// Picks the full matrix for small inputs and on-demand rows otherwise.
    pub fn auto(proxies: &'a ProxyMatrix<T>) -> Self {
        let policy = if proxies.rows() <= 4096 { CachePolicy::FullMatrix } else { CachePolicy::OnDemand };
        Self::new(proxies, policy)
    }

    pub fn policy(&self) -> CachePolicy {
        if self.cache.is_some() {
            CachePolicy::FullMatrix
        } else {
            CachePolicy::OnDemand
        }
    }

    pub fn len(&self) -> usize {
        self.proxies.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn proxies(&self) -> &ProxyMatrix<T> {
        self.proxies
    }

    /// Checked distance.
    pub fn distance(&self, i: usize, j: usize) -> Result<T> {
        let n = self.len();
        if i >= n || j >= n {
            return Err(Error::invalid(format!("index pair ({i}, {j}) out of range (n = {n})")));
        }
        Ok(self.dist(i, j))
    }

    /// Unchecked distance; panics on out-of-range indices.
    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> T {
        match &self.cache {
            Some(m) => m[i * self.len() + j],
            None => row_distance(self.proxies, i, j),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    #[test]
    fn uniform_softmax_residual() {
        let r = class_residual_proxy(&[0.0f64, 0.0], 0).unwrap();
        assert_eq!(r, vec![-0.5, 0.5]);
    }

    #[test]
    fn confident_correct_residual_vanishes() {
        let r = class_residual_proxy(&[30.0f64, -30.0], 0).unwrap();
        assert!(norm(&r) <= 1e-8);
    }

    #[test]
    fn residual_rejects_bad_input() {
        assert!(class_residual_proxy(&[0.0f64, f64::NAN], 0).is_err());
        assert!(class_residual_proxy(&[0.0f64, 1.0], 2).is_err());
        assert!(class_residual_proxy(&[0.0f64], 0).is_err());
    }

    #[test]
    fn residual_sums_to_zero_and_is_bounded() {
        let mut rng = seeded(11);
        for _ in 0..500 {
            let c = 2 + (uniform(&mut rng, 0.0, 6.0) as usize);
            let logits: Vec<f64> = (0..c).map(|_| uniform(&mut rng, -20.0, 20.0)).collect();
            let label = (uniform(&mut rng, 0.0, c as f64) as usize).min(c - 1);
            let r = class_residual_proxy(&logits, label).unwrap();
            assert!(r.iter().sum::<f64>().abs() <= 1e-12);
            assert!(r.iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn full_proxy_zero_embedding_and_scalar_cases() {
        let logits = [0.3f64, -1.2, 0.8];
        let full = last_layer_full_proxy(&[0.0, 0.0], &logits, 2).unwrap();
        let r = class_residual_proxy(&logits, 2).unwrap();
        assert!(full[..6].iter().all(|&x| x == 0.0));
        assert_eq!(&full[6..], &r[..]);

        let v = last_layer_full_proxy(&[1.0f64], &[0.0, 0.0], 0).unwrap();
        assert_eq!(v, vec![-0.5, 0.5, -0.5, 0.5]);
        assert!(last_layer_full_proxy::<f64>(&[], &[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn distance_hand_cases() {
        let m = ProxyMatrix::from_rows(&[vec![0.0f64, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_distance(&m, 0, 1).unwrap(), 5.0);
        assert_eq!(pairwise_distance(&m, 1, 1).unwrap(), 0.0);
        assert!(pairwise_distance(&m, 0, 2).is_err());
    }

    #[test]
    fn distance_matches_naive_two_loop() {
        let mut rng = seeded(5);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..8).map(|_| uniform(&mut rng, -3.0, 3.0)).collect()).collect();
        let m = ProxyMatrix::from_rows(&rows).unwrap();
        let cached = DistanceOracle::new(&m, CachePolicy::FullMatrix);
        let lazy = DistanceOracle::new(&m, CachePolicy::OnDemand);
        for i in 0..10 {
            for j in 0..10 {
                let acc: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                let naive = if i == j { 0.0 } else { acc.sqrt() };
                assert_eq!(pairwise_distance(&m, i, j).unwrap(), naive);
                assert_eq!(cached.dist(i, j).to_bits(), lazy.dist(i, j).to_bits());
                assert_eq!(cached.dist(i, j), cached.dist(j, i));
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_misshaped() {
        assert!(ProxyMatrix::new(1, 2, vec![0.0f64, f64::INFINITY]).is_err());
        assert!(ProxyMatrix::new(2, 2, vec![0.0f64; 3]).is_err());
    }

    #[test]
    fn normalize_rows_keeps_zero_rows() {
        let mut m = ProxyMatrix::from_rows(&[vec![3.0f64, 4.0], vec![0.0, 0.0]]).unwrap();
        m.normalize_rows();
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert_eq!(m.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn f32_ingestion_widens() {
        let m32 = ProxyMatrix::new(1, 2, vec![0.1f32, 2.5]).unwrap();
        let m64: ProxyMatrix<f64> = m32.cast().unwrap();
        assert_eq!(m64.row(0), &[0.1f32 as f64, 2.5]);
    }
}
