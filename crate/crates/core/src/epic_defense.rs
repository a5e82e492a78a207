//! Iterative elimination of isolated gradient medoids during training.
//!
//! After `warmup_epochs` of ordinary training, and then every
//! `interval_epochs`, each class is summarized by greedy facility-location
//! medoids in proxy space. Every candidate is assigned to its nearest medoid;
//! medoids that end up alone (`gamma == 1`) are removed from the active set
//! for good, before that epoch's training pass.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetState, DropRecord};
use crate::error::{Error, Result};
use crate::facility_location::{
    greedy_select_with, medoid_budget, FacilityObjective, GreedyMode, GreedyOptions, DEFAULT_STOCHASTIC_EPSILON,
};
use crate::gradient_proxy::{DistanceOracle, ProxyMatrix, ProxyMode};
use crate::rng::derive_seed;
use crate::scalar::{cosine, Real};
use crate::toy_trainer::{extract_proxies, ToyModel, TrainTrace, Trainer};

pub const DEFAULT_MIN_CLASS_SIZE_GUARD: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_interval")]
    pub interval_epochs: usize,
    #[serde(default = "default_fraction")]
    pub medoid_fraction: f64,
    #[serde(default)]
    pub greedy_mode: GreedyMode,
    #[serde(default)]
    pub proxy_mode: ProxyMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_guard")]
    pub min_class_size_guard: usize,
    /// Rescale proxies to unit norm before clustering.
    #[serde(default)]
    pub normalize_proxies: bool,
    #[serde(default = "default_epsilon")]
    pub stochastic_epsilon: f64,
}

fn default_warmup() -> usize {
    10
}
fn default_interval() -> usize {
    2
}
fn default_fraction() -> f64 {
    0.1
}
fn default_guard() -> usize {
    DEFAULT_MIN_CLASS_SIZE_GUARD
}
fn default_epsilon() -> f64 {
    DEFAULT_STOCHASTIC_EPSILON
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: default_warmup(),
            interval_epochs: default_interval(),
            medoid_fraction: default_fraction(),
            greedy_mode: GreedyMode::default(),
            proxy_mode: ProxyMode::default(),
            seed: 0,
            min_class_size_guard: default_guard(),
            normalize_proxies: false,
            stochastic_epsilon: default_epsilon(),
        }
    }
}

impl DefenseConfig {
    /// Preset for a medoid fraction of 0.1, 0.2 or 0.3: warmup 10, 20 or 30
    /// epochs respectively, interval 2 (40-epoch pipelines).
    pub fn preset(fraction: f64) -> Self {
        let warmup = (fraction * 100.0).round().max(10.0) as usize;
        Self { warmup_epochs: warmup, medoid_fraction: fraction, ..Self::default() }
    }

    /// Interval 10 for 200-epoch pipelines.
    pub fn preset_long(fraction: f64) -> Self {
        Self { interval_epochs: 10, ..Self::preset(fraction) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval_epochs == 0 {
            return Err(Error::Config { key: "interval_epochs".into(), message: "must be at least 1".into() });
        }
        if !(self.medoid_fraction > 0.0 && self.medoid_fraction <= 1.0) {
            return Err(Error::Config { key: "medoid_fraction".into(), message: "must lie in (0, 1]".into() });
        }
        if !(self.stochastic_epsilon > 0.0 && self.stochastic_epsilon < 1.0) {
            return Err(Error::Config { key: "stochastic_epsilon".into(), message: "must lie in (0, 1)".into() });
        }
        Ok(())
    }

    /// Whether an elimination round runs before training epoch `epoch`.
    pub fn is_round_epoch(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs && (epoch - self.warmup_epochs).is_multiple_of(self.interval_epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Class is no larger than `min_class_size_guard`.
    SizeGuard,
    /// The budget would make every member a medoid.
    BudgetCoversClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub medoid: usize,
    /// Position in the greedy sequence.
    pub rank: usize,
    pub gamma: usize,
    /// Ground-truth poisons among the members, when a mask is known.
    pub poison_members: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRound {
    pub class: usize,
    pub size: usize,
    pub budget: usize,
    pub skipped: Option<SkipReason>,
    pub clusters: Vec<ClusterSummary>,
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub epoch: usize,
    pub classes: Vec<ClassRound>,
    pub dropped: Vec<DropRecord>,
    pub dropped_clean: Option<usize>,
    pub dropped_poison: Option<usize>,
}

impl RoundReport {
    pub fn dropped_indices(&self) -> Vec<usize> {
        self.dropped.iter().map(|r| r.index).collect()
    }
}

/// Rows of a proxy matrix tagged with their original index and label.
pub struct RoundInput<'a, T> {
    pub ids: &'a [usize],
    pub labels: &'a [usize],
    pub classes: usize,
    pub poison: Option<&'a [bool]>,
    pub proxies: &'a ProxyMatrix<T>,
}

/// One elimination round over active examples, without mutating the state.
pub fn elimination_round<T: Real>(
    state: &DatasetState<T>,
    proxies: &ProxyMatrix<T>,
    config: &DefenseConfig,
    epoch: usize,
) -> Result<RoundReport> {
    if proxies.rows() != state.active().len() {
        return Err(Error::invalid(format!(
            "{} proxy rows for {} active examples",
            proxies.rows(),
            state.active().len()
        )));
    }
    let labels: Vec<usize> = state.active().iter().map(|&i| state.label(i)).collect();
    let poison: Option<Vec<bool>> = state.poison_mask().map(|m| state.active().iter().map(|&i| m[i]).collect());
    let input = RoundInput {
        ids: state.active(),
        labels: &labels,
        classes: state.classes(),
        poison: poison.as_deref(),
        proxies,
    };
    eliminate(&input, config, epoch)
}

/// Per-class medoid selection and isolation on externally supplied rows.
pub fn eliminate<T: Real>(input: &RoundInput<'_, T>, config: &DefenseConfig, epoch: usize) -> Result<RoundReport> {
    config.validate()?;
    let n = input.proxies.rows();
    if input.ids.len() != n || input.labels.len() != n || input.poison.is_some_and(|p| p.len() != n) {
        return Err(Error::invalid("round input columns are misaligned with the proxy rows"));
    }
    if let Some(&bad) = input.labels.iter().find(|&&y| y >= input.classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let mut proxies = input.proxies.clone();
    if config.normalize_proxies {
        proxies.normalize_rows();
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); input.classes];
    for (row, &y) in input.labels.iter().enumerate() {
        members[y].push(row);
    }
    let rounds: Vec<ClassRound> = members
        .par_iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(class, rows)| class_round(input, &proxies, config, epoch, class, rows))
        .collect::<Result<_>>()?;

    let mut dropped = Vec::new();
    for cr in &rounds {
        for cl in &cr.clusters {
            if cl.gamma == 1 {
                dropped.push(DropRecord { index: cl.medoid, epoch, class: cr.class, medoid_rank: cl.rank });
            }
        }
    }
    let (dropped_clean, dropped_poison) = match input.poison {
        Some(mask) => {
            let row_of: BTreeMap<usize, usize> = input.ids.iter().enumerate().map(|(r, &i)| (i, r)).collect();
            let p = dropped.iter().filter(|d| mask[row_of[&d.index]]).count();
            (Some(dropped.len() - p), Some(p))
        }
        None => (None, None),
    };
    Ok(RoundReport { round: 0, epoch, classes: rounds, dropped, dropped_clean, dropped_poison })
}

fn class_round<T: Real>(
    input: &RoundInput<'_, T>,
    proxies: &ProxyMatrix<T>,
    config: &DefenseConfig,
    epoch: usize,
    class: usize,
    rows: &[usize],
) -> Result<ClassRound> {
    let size = rows.len();
    let budget = medoid_budget(config.medoid_fraction, size);
    let skipped = if size <= config.min_class_size_guard {
        Some(SkipReason::SizeGuard)
    } else if budget >= size {
        Some(SkipReason::BudgetCoversClass)
    } else {
        None
    };
    if skipped.is_some() {
        return Ok(ClassRound { class, size, budget, skipped, clusters: Vec::new(), dropped: Vec::new() });
    }

    // Rows are in ascending original-index order, so local positions
    // preserve the lowest-original-index tie-break.
    let local = proxies.select_rows(rows)?;
    let oracle = DistanceOracle::auto(&local);
    let objective = FacilityObjective::new(&oracle, (0..size).collect())?;
    let opts = GreedyOptions {
        mode: config.greedy_mode,
        seed: derive_seed(config.seed, ((epoch as u64) << 32) | class as u64),
        epsilon: config.stochastic_epsilon,
    };
    let selection = greedy_select_with(&objective, budget, opts)?;

    let mut poison_members = vec![0usize; selection.medoids.len()];
    if let Some(mask) = input.poison {
        let slot: BTreeMap<usize, usize> = selection.medoids.iter().enumerate().map(|(s, &m)| (m, s)).collect();
        for (local_pos, &medoid) in selection.assignment.iter().enumerate() {
            if mask[rows[local_pos]] {
                poison_members[slot[&medoid]] += 1;
            }
        }
    }
    let clusters: Vec<ClusterSummary> = selection
        .medoids
        .iter()
        .enumerate()
        .map(|(rank, &m)| ClusterSummary {
            medoid: input.ids[rows[m]],
            rank,
            gamma: selection.gamma[rank],
            poison_members: input.poison.map(|_| poison_members[rank]),
        })
        .collect();
    let dropped = clusters.iter().filter(|c| c.gamma == 1).map(|c| c.medoid).collect();
    Ok(ClassRound { class, size, budget, skipped: None, clusters, dropped })
}

/// Called before each epoch's training pass, after any elimination round.
pub type EpochObserver<'a, T> = dyn FnMut(usize, &ToyModel<T>, &DatasetState<T>) -> Result<()> + 'a;

/// Trains with elimination rounds at epochs `K, K+T, K+2T, …`.
pub fn run_defense<T: Real>(
    state: &mut DatasetState<T>,
    model: &mut ToyModel<T>,
    config: &DefenseConfig,
    trainer: &mut Trainer,
    total_epochs: usize,
) -> Result<TrainTrace<T>> {
    run_defense_observed(state, model, config, trainer, total_epochs, &mut |_, _, _| Ok(()))
}

pub fn run_defense_observed<T: Real>(
    state: &mut DatasetState<T>,
    model: &mut ToyModel<T>,
    config: &DefenseConfig,
    trainer: &mut Trainer,
    total_epochs: usize,
    observer: &mut EpochObserver<'_, T>,
) -> Result<TrainTrace<T>> {
    config.validate()?;
    for class in state.populated_classes() {
        if state.active_count(class) == 0 {
            return Err(Error::ClassExhausted { class, epoch: 0 });
        }
    }
    let mut trace = TrainTrace::default();
    for epoch in 0..total_epochs {
        if config.is_round_epoch(epoch) {
            check_budget(state, config)?;
            let proxies = extract_proxies(model, state, config.proxy_mode)?;
            let mut report = elimination_round(state, &proxies, config, epoch)?;
            report.round = trace.rounds.len() + 1;
            state.drop_examples(&report.dropped)?;
            for class in state.populated_classes() {
                if state.active_count(class) == 0 {
                    return Err(Error::ClassExhausted { class, epoch });
                }
            }
            trace.rounds.push(report);
        }
        observer(epoch, model, state)?;
        trace.epochs.push(trainer.run_epoch(model, state, epoch)?);
    }
    Ok(trace)
}

fn check_budget<T: Real>(state: &DatasetState<T>, config: &DefenseConfig) -> Result<()> {
    for class in state.populated_classes() {
        let size = state.active_count(class);
        let k = medoid_budget(config.medoid_fraction, size);
        if size > config.min_class_size_guard && size > 1 && k >= size {
            return Err(Error::DegenerateBudget { class, k, size });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Cluster size (gamma).
    pub size: usize,
    pub clean: usize,
    pub poison: usize,
    /// Members whose status is unknown (no ground-truth mask).
    pub unknown: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterHistogram {
    pub labeled: bool,
    pub buckets: Vec<HistogramBucket>,
}

impl ClusterHistogram {
    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.clean + b.poison + b.unknown).sum()
    }
}

/// Membership counts by cluster size, optionally for a single class.
pub fn cluster_histogram(report: &RoundReport, class: Option<usize>) -> ClusterHistogram {
    let mut map: BTreeMap<usize, HistogramBucket> = BTreeMap::new();
    let mut labeled = true;
    for cr in report.classes.iter().filter(|cr| class.is_none_or(|c| c == cr.class)) {
        for cl in &cr.clusters {
            let b = map.entry(cl.gamma).or_insert(HistogramBucket { size: cl.gamma, clean: 0, poison: 0, unknown: 0 });
            match cl.poison_members {
                Some(p) => {
                    b.poison += p;
                    b.clean += cl.gamma - p;
                }
                None => {
                    labeled = false;
                    b.unknown += cl.gamma;
                }
            }
        }
    }
    ClusterHistogram { labeled, buckets: map.into_values().filter(|b| b.size > 0).collect() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTrace {
    /// Mean cosine over distinct poison pairs, per epoch.
    pub poison_poison: Vec<Option<f64>>,
    /// Mean cosine between each poison and the target, per epoch.
    pub poison_target: Vec<Option<f64>>,
    /// Pairs skipped because one side had zero norm.
    pub skipped_pairs: usize,
}

/// Cosine alignment of poison proxies with each other and with the target.
///
/// `frames[t]` holds proxy rows at epoch `t`, `poison_mask` flags the poison
/// rows and `targets[t]` is the target's proxy under the adversarial label.
pub fn cosine_alignment_trace<T: Real>(
    frames: &[ProxyMatrix<T>],
    poison_mask: &[bool],
    targets: &[Vec<T>],
) -> Result<CosineTrace> {
    if frames.len() != targets.len() {
        return Err(Error::invalid("one target proxy is required per epoch"));
    }
    if !poison_mask.iter().any(|&p| p) {
        return Err(Error::invalid("at least one poison is required"));
    }
    let mut out = CosineTrace { poison_poison: Vec::new(), poison_target: Vec::new(), skipped_pairs: 0 };
    for (frame, target) in frames.iter().zip(targets) {
        if frame.rows() != poison_mask.len() {
            return Err(Error::invalid("poison mask is misaligned with proxy rows"));
        }
        if target.len() != frame.dim() {
            return Err(Error::invalid("target proxy width differs from frame width"));
        }
        let poisons: Vec<&[T]> = (0..frame.rows()).filter(|&r| poison_mask[r]).map(|r| frame.row(r)).collect();
        let mut pp = Vec::new();
        for a in 0..poisons.len() {
            for b in (a + 1)..poisons.len() {
                match cosine(poisons[a], poisons[b]) {
                    Some(c) => pp.push(c.to_f64_lossy()),
                    None => out.skipped_pairs += 1,
                }
            }
        }
        let mut pt = Vec::new();
        for p in &poisons {
            match cosine(p, target) {
                Some(c) => pt.push(c.to_f64_lossy()),
                None => out.skipped_pairs += 1,
            }
        }
        out.poison_poison.push(mean(&pp));
        out.poison_target.push(mean(&pt));
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
