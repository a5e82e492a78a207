//! Facility-location maximization for gradient-space medoids.
//!
//! For candidates `V` and a distance `d`, the objective is
//!
//! ```text
//! F(S) = Σ_{i ∈ V} max_{j ∈ S} (c0 − d(i, j)),   F(∅) = 0
//! ```
//!
//! which is monotone submodular whenever `c0` is at least the largest
//! pairwise distance. Maximizing it under `|S| ≤ k` is the k-medoids problem
//! in disguise; the greedy maximizer is within `(1 − 1/e)` of optimal.
//!
//! All three greedy variants break ties toward the lowest original index, so
//! naive and lazy greedy produce the same sequence on every input.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient_proxy::DistanceOracle;
use crate::rng::{sample_without_replacement, seeded};
use crate::scalar::Real;

/// Largest candidate count accepted by [`brute_force_optimum`].
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Default stochastic-greedy accuracy parameter.
pub const DEFAULT_STOCHASTIC_EPSILON: f64 = 0.1;

/// Above this many candidates, naive greedy evaluates gains on the rayon pool.
const PARALLEL_GAIN_THRESHOLD: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyMode {
    Naive,
    #[default]
    Lazy,
    Stochastic,
}

impl std::str::FromStr for GreedyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(GreedyMode::Naive),
            "lazy" => Ok(GreedyMode::Lazy),
            "stochastic" => Ok(GreedyMode::Stochastic),
            other => Err(Error::invalid(format!("unknown greedy mode `{other}` (expected naive, lazy or stochastic)"))),
        }
    }
}

/// Facility-location objective over one class's candidates.
#[derive(Debug, Clone)]
pub struct FacilityObjective<'a, T> {
    oracle: &'a DistanceOracle<'a, T>,
    indices: Vec<usize>,
    /// Positions into `indices`, sorted by original index.
    order: Vec<usize>,
    c0: T,
}

impl<'a, T: Real> FacilityObjective<'a, T> {
    /// Builds the objective with `c0` set to the exact maximum pairwise
    /// distance among `indices`.
    pub fn new(oracle: &'a DistanceOracle<'a, T>, indices: Vec<usize>) -> Result<Self> {
        Self::check_indices(oracle, &indices)?;
        let mut c0 = T::zero();
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                c0 = c0.max(oracle.dist(i, j));
            }
        }
        Ok(Self::assemble(oracle, indices, c0))
    }

    /// Builds the objective with a caller-supplied offset, which must dominate
    /// every pairwise distance.
    pub fn with_c0(oracle: &'a DistanceOracle<'a, T>, indices: Vec<usize>, c0: T) -> Result<Self> {
        Self::check_indices(oracle, &indices)?;
        if !c0.is_finite() {
            return Err(Error::invalid("c0 must be finite"));
        }
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                if oracle.dist(i, j) > c0 {
                    return Err(Error::invalid(format!("c0 = {c0} is below the distance between {i} and {j}")));
                }
            }
        }
        Ok(Self::assemble(oracle, indices, c0))
    }

    fn check_indices(oracle: &DistanceOracle<'_, T>, indices: &[usize]) -> Result<()> {
        let n = oracle.len();
        let mut seen = indices.to_vec();
        seen.sort_unstable();
        if let Some(&bad) = seen.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("candidate {bad} out of range (n = {n})")));
        }
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("candidate indices must be distinct"));
        }
        Ok(())
    }

    fn assemble(oracle: &'a DistanceOracle<'a, T>, indices: Vec<usize>, c0: T) -> Self {
        let mut order: Vec<usize> = (0..indices.len()).collect();
        order.sort_by_key(|&p| indices[p]);
        Self { oracle, indices, order, c0 }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn c0(&self) -> T {
        self.c0
    }

    #[inline]
    fn similarity(&self, p: usize, q: usize) -> T {
        self.c0 - self.oracle.dist(self.indices[p], self.indices[q])
    }

    fn position_of(&self, original: usize) -> Option<usize> {
        self.order.binary_search_by_key(&original, |&p| self.indices[p]).ok().map(|k| self.order[k])
    }

    fn positions_of(&self, set: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(set.len());
        for &s in set {
            let p = self
                .position_of(s)
                .ok_or_else(|| Error::invalid(format!("index {s} is not a candidate of this objective")))?;
            if out.contains(&p) {
                return Err(Error::invalid(format!("index {s} listed twice")));
            }
            out.push(p);
        }
        Ok(out)
    }

    fn value_at_positions(&self, set: &[usize]) -> T {
        if set.is_empty() {
            return T::zero();
        }
        (0..self.len()).map(|i| set.iter().map(|&j| self.similarity(i, j)).fold(T::neg_infinity(), T::max)).sum()
    }

    /// `F(S)` for a set of original indices.
    pub fn evaluate(&self, set: &[usize]) -> Result<T> {
        let pos = self.positions_of(set)?;
        Ok(self.value_at_positions(&pos))
    }

    /// Marginal gain `F(e | S)` given the current per-point coverage.
    #[inline]
    fn gain(&self, e: usize, coverage: &[T]) -> T {
        coverage.iter().enumerate().fold(T::zero(), |acc, (i, &best)| {
            let s = self.similarity(i, e);
            if s > best {
                acc + (s - best)
            } else {
                acc
            }
        })
    }

    fn absorb(&self, e: usize, coverage: &mut [T]) {
        for (i, best) in coverage.iter_mut().enumerate() {
            let s = self.similarity(i, e);
            if s > *best {
                *best = s;
            }
        }
    }
}

/// Result of one medoid selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedoidSelection<T> {
    /// Original indices of the medoids, in selection order.
    pub medoids: Vec<usize>,
    /// Marginal gain realized at each selection step.
    pub gains: Vec<T>,
    /// For each candidate (in the objective's order), its nearest medoid.
    pub assignment: Vec<usize>,
    /// Number of candidates assigned to each medoid, aligned with `medoids`.
    pub gamma: Vec<usize>,
}

impl<T: Real> MedoidSelection<T> {
    pub fn value(&self) -> T {
        self.gains.iter().copied().sum()
    }

    pub fn gamma_of(&self, medoid: usize) -> Option<usize> {
        self.medoids.iter().position(|&m| m == medoid).map(|p| self.gamma[p])
    }

    /// Medoids no other candidate is nearest to.
    pub fn isolated(&self) -> Vec<usize> {
        self.medoids.iter().zip(&self.gamma).filter(|(_, &g)| g == 1).map(|(&m, _)| m).collect()
    }
}

/// Per-class medoid budget: `max(1, round(fraction · size))`.
pub fn medoid_budget(fraction: f64, size: usize) -> usize {
    ((fraction * size as f64).round() as usize).max(1)
}

/// Stochastic-greedy sample size `ceil((n / k) · ln(1 / ε))`, at least 1.
pub fn stochastic_sample_size(n: usize, k: usize, epsilon: f64) -> usize {
    let s = (n as f64 / k.max(1) as f64) * (1.0 / epsilon).ln();
    (s.ceil() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOptions {
    pub mode: GreedyMode,
    pub seed: u64,
    pub epsilon: f64,
}

impl GreedyOptions {
    pub fn new(mode: GreedyMode, seed: u64) -> Self {
        Self { mode, seed, epsilon: DEFAULT_STOCHASTIC_EPSILON }
    }
}

/// Greedy maximization of `F` under `|S| ≤ k`, followed by nearest-medoid
/// assignment.
pub fn greedy_select<T: Real>(
    objective: &FacilityObjective<'_, T>,
    k: usize,
    mode: GreedyMode,
    seed: u64,
) -> Result<MedoidSelection<T>> {
    greedy_select_with(objective, k, GreedyOptions::new(mode, seed))
}

pub fn greedy_select_with<T: Real>(
    objective: &FacilityObjective<'_, T>,
    k: usize,
    opts: GreedyOptions,
) -> Result<MedoidSelection<T>> {
    if objective.is_empty() {
        return Err(Error::invalid("facility objective has no candidates"));
    }
    if k == 0 {
        return Err(Error::invalid("medoid budget k must be at least 1"));
    }
    let k = k.min(objective.len());
    let (positions, gains) = match opts.mode {
        GreedyMode::Naive => naive_greedy(objective, k),
        GreedyMode::Lazy => lazy_greedy(objective, k),
        GreedyMode::Stochastic => {
            if !(opts.epsilon > 0.0 && opts.epsilon < 1.0) {
                return Err(Error::invalid("stochastic epsilon must lie in (0, 1)"));
            }
            stochastic_greedy(objective, k, opts.seed, opts.epsilon)
        }
    };
    let medoids: Vec<usize> = positions.iter().map(|&p| objective.indices[p]).collect();
    let (assignment, gamma) = assign_positions(objective, &positions);
    Ok(MedoidSelection { medoids, gains, assignment, gamma })
}

fn naive_greedy<T: Real>(obj: &FacilityObjective<'_, T>, k: usize) -> (Vec<usize>, Vec<T>) {
    let n = obj.len();
    let mut coverage = vec![T::zero(); n];
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(k);
    let mut gains = Vec::with_capacity(k);
    for _ in 0..k {
        let candidates: Vec<usize> = obj.order.iter().copied().filter(|&p| !taken[p]).collect();
        let scored: Vec<T> = if n >= PARALLEL_GAIN_THRESHOLD {
            candidates.par_iter().map(|&p| obj.gain(p, &coverage)).collect()
        } else {
            candidates.iter().map(|&p| obj.gain(p, &coverage)).collect()
        };
        // `candidates` ascend by original index, so a strict comparison keeps the lowest.
        let mut best = 0;
        for (c, g) in scored.iter().enumerate().skip(1) {
            if *g > scored[best] {
                best = c;
            }
        }
        let e = candidates[best];
        taken[e] = true;
        obj.absorb(e, &mut coverage);
        picked.push(e);
        gains.push(scored[best]);
    }
    (picked, gains)
}

struct HeapEntry<T> {
    bound: T,
    original: usize,
    position: usize,
    round: usize,
}

impl<T: Real> PartialEq for HeapEntry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Real> Eq for HeapEntry<T> {}

impl<T: Real> PartialOrd for HeapEntry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for HeapEntry<T> {
    // Max-heap on the bound; among equal bounds the lower original index wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.partial_cmp(&other.bound).unwrap_or(Ordering::Equal).then_with(|| other.original.cmp(&self.original))
    }
}

/// Minoux's accelerated greedy. Stale bounds never underestimate the true
/// gain: each coverage term only grows, and IEEE addition is monotone.
fn lazy_greedy<T: Real>(obj: &FacilityObjective<'_, T>, k: usize) -> (Vec<usize>, Vec<T>) {
    let n = obj.len();
    let mut coverage = vec![T::zero(); n];
    let mut heap: BinaryHeap<HeapEntry<T>> = obj
        .order
        .iter()
        .map(|&p| HeapEntry { bound: obj.gain(p, &coverage), original: obj.indices[p], position: p, round: 0 })
        .collect();
    let mut picked = Vec::with_capacity(k);
    let mut gains = Vec::with_capacity(k);
    let mut round = 0;
    while picked.len() < k {
        let Some(mut top) = heap.pop() else { break };
        if top.round == round {
            obj.absorb(top.position, &mut coverage);
            picked.push(top.position);
            gains.push(top.bound);
            round += 1;
        } else {
            top.bound = obj.gain(top.position, &coverage);
            top.round = round;
            heap.push(top);
        }
    }
    (picked, gains)
}

fn stochastic_greedy<T: Real>(
    obj: &FacilityObjective<'_, T>,
    k: usize,
    seed: u64,
    epsilon: f64,
) -> (Vec<usize>, Vec<T>) {
    let n = obj.len();
    let sample = stochastic_sample_size(n, k, epsilon);
    let mut rng = seeded(seed);
    let mut coverage = vec![T::zero(); n];
    // Remaining candidates, kept in ascending original-index order.
    let mut remaining = obj.order.clone();
    let mut picked = Vec::with_capacity(k);
    let mut gains = Vec::with_capacity(k);
    for _ in 0..k {
        let draws = sample_without_replacement(&mut rng, remaining.len(), sample);
        let mut best: Option<(usize, T)> = None;
        for &slot in &draws {
            let p = remaining[slot];
            let g = obj.gain(p, &coverage);
            best = match best {
                None => Some((slot, g)),
                Some((bs, bg)) => {
                    let better = g > bg || (g == bg && obj.indices[p] < obj.indices[remaining[bs]]);
                    if better {
                        Some((slot, g))
                    } else {
                        Some((bs, bg))
                    }
                }
            };
        }
        let (slot, g) = best.expect("sample is nonempty while candidates remain");
        let e = remaining.remove(slot);
        obj.absorb(e, &mut coverage);
        picked.push(e);
        gains.push(g);
    }
    (picked, gains)
}

/// Nearest-medoid assignment and per-medoid counts for an arbitrary medoid set.
///
/// Each candidate goes to the closest medoid, ties to the lowest original
/// index. A medoid that coincides with a lower-indexed medoid is therefore
/// absorbed by it and gets `gamma = 0`.
pub fn assign_and_count<T: Real>(
    objective: &FacilityObjective<'_, T>,
    medoids: &[usize],
) -> Result<MedoidSelection<T>> {
    if medoids.is_empty() {
        return Err(Error::invalid("medoid set must be nonempty"));
    }
    let positions = objective.positions_of(medoids)?;
    let (assignment, gamma) = assign_positions(objective, &positions);
    Ok(MedoidSelection { medoids: medoids.to_vec(), gains: Vec::new(), assignment, gamma })
}

fn assign_positions<T: Real>(obj: &FacilityObjective<'_, T>, positions: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut by_index: Vec<(usize, usize)> =
        positions.iter().enumerate().map(|(slot, &p)| (obj.indices[p], slot)).collect();
    by_index.sort_unstable();
    let mut gamma = vec![0usize; positions.len()];
    let assignment = (0..obj.len())
        .map(|i| {
            let mut best_slot = by_index[0].1;
            let mut best_d = obj.oracle.dist(obj.indices[i], by_index[0].0);
            for &(m, slot) in &by_index[1..] {
                let d = obj.oracle.dist(obj.indices[i], m);
                if d < best_d {
                    best_d = d;
                    best_slot = slot;
                }
            }
            gamma[best_slot] += 1;
            obj.indices[positions[best_slot]]
        })
        .collect();
    (assignment, gamma)
}

/// Exact maximizer of `F` over all subsets of size at most `k`; ties go to
/// the lexicographically smallest sorted index list. Returns sorted indices.
pub fn brute_force_optimum<T: Real>(objective: &FacilityObjective<'_, T>, k: usize) -> Result<(Vec<usize>, T)> {
    let n = objective.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge { size: n, limit: BRUTE_FORCE_LIMIT });
    }
    let k = k.min(n);
    // Work in sorted-original-index positions so lexicographic order is natural.
    let order = &objective.order;
    let mut best_set: Vec<usize> = Vec::new();
    let mut best_val = T::zero();
    let mut subset = Vec::with_capacity(k);
    for mask in 1u32..(1u32 << n) {
        if mask.count_ones() as usize > k {
            continue;
        }
        subset.clear();
        subset.extend((0..n).filter(|b| mask & (1 << b) != 0).map(|b| order[b]));
        let v = objective.value_at_positions(&subset);
        let originals: Vec<usize> = subset.iter().map(|&p| objective.indices[p]).collect();
        if v > best_val || (v == best_val && (best_set.is_empty() || originals < best_set)) {
            best_val = v;
            best_set = originals;
        }
    }
    Ok((best_set, best_val))
}
