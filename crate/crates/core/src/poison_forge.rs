//! Toy clean-label poisoning attacks against the desk-scale models.
//!
//! Poisons are training examples `x_i + δ_i` that keep their labels, with
//! `‖δ_i‖∞ ≤ ε`. Two crafting objectives are provided:
//!
//! * gradient matching: maximize the cosine between the mean poison
//!   parameter-gradient and the gradient of the target under the
//!   adversarial label;
//! * feature collision: pull each poison's embedding onto the target's.
//!
//! Both use signed-gradient ascent with projection onto the ε-box after every
//! step. A step that would lower the objective is retried at half size a few
//! times and otherwise skipped, so the recorded objective never decreases.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetState;
use crate::epic_defense::{run_defense_observed, DefenseConfig, EpochObserver, RoundReport};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scalar::{cosine, dot, norm, Real};
use crate::toy_trainer::{evaluate, Architecture, BatchMode, LrSchedule, ToyModel, TrainTrace, Trainer};

pub const DEFAULT_CRAFT_STEPS: usize = 250;
/// Effective-subset search enumerates exhaustively up to this many poisons.
pub const EXHAUSTIVE_SUBSET_LIMIT: usize = 16;
const BACKTRACK_HALVINGS: usize = 8;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    #[default]
    GradientMatch,
    FeatureCollision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec<T> {
    /// Original indices of the poisoned base examples.
    pub base_indices: Vec<usize>,
    pub target: Vec<T>,
    pub adversarial_label: usize,
    /// L∞ radius of every perturbation.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon / steps`.
    pub step_size: Option<f64>,
    pub objective: AttackObjective,
}

impl<T: Real> AttackSpec<T> {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(if self.steps == 0 { 0.0 } else { self.epsilon / self.steps as f64 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult<T> {
    /// One perturbation per base example, aligned with `base_indices`.
    pub perturbations: Vec<Vec<T>>,
    /// Gradient-matching cosine before crafting.
    pub initial_alignment: f64,
    /// Gradient-matching cosine after crafting.
    pub final_alignment: f64,
    /// Crafting objective after each step (cosine for gradient matching,
    /// negated mean squared embedding distance for feature collision).
    pub objective_trace: Vec<f64>,
    pub line_search_failures: usize,
    /// Whether the target flipped after victim training, once evaluated.
    pub success: Option<bool>,
}

/// Projects onto the `[-ε, ε]` box. Idempotent.
pub fn project_box<T: Real>(delta: &mut [T], epsilon: T) {
    for d in delta.iter_mut() {
        *d = d.max(-epsilon).min(epsilon);
    }
}

/// Gradient of `⟨∇_θ CE(x, y), u⟩` with respect to the input `x`.
pub fn input_grad_of_grad_dot<T: Real>(model: &ToyModel<T>, x: &[T], y: usize, u: &[T]) -> Vec<T> {
    match model.arch() {
        Architecture::Linear => {
            let c_count = model.classes();
            let m = model.input_dim();
            let (w, _) = model.params().split_at(c_count * m);
            let (uw, ub) = u.split_at(c_count * m);
            let logits = model.forward(x).logits;
            let p = crate::gradient_proxy::softmax(&logits);
            let mut r = p.clone();
            r[y] = r[y] - T::one();
            // s_c = U_c·x + u_b,c ; ∇x = Σ_c s_c p_c (W_c − W̄) + Σ_c r_c U_c
            let mut wbar = vec![T::zero(); m];
            for c in 0..c_count {
                for j in 0..m {
                    wbar[j] = wbar[j] + p[c] * w[c * m + j];
                }
            }
            let mut out = vec![T::zero(); m];
            for c in 0..c_count {
                let uc = &uw[c * m..(c + 1) * m];
                let s = dot(uc, x) + ub[c];
                let coef = s * p[c];
                for j in 0..m {
                    out[j] = out[j] + coef * (w[c * m + j] - wbar[j]) + r[c] * uc[j];
                }
            }
            out
        }
        Architecture::OneHidden { .. } => {
            let h = T::lit(FD_STEP);
            let mut xp = x.to_vec();
            (0..x.len())
                .map(|j| {
                    let orig = xp[j];
                    xp[j] = orig + h;
                    let fp = dot(&model.example_grad(&xp, y).1, u);
                    xp[j] = orig - h;
                    let fm = dot(&model.example_grad(&xp, y).1, u);
                    xp[j] = orig;
                    (fp - fm) / (h + h)
                })
                .collect()
        }
    }
}

/// Transposed embedding Jacobian applied to `v`.
fn embedding_vjp<T: Real>(model: &ToyModel<T>, x: &[T], v: &[T]) -> Vec<T> {
    match model.arch() {
        Architecture::Linear => v.to_vec(),
        Architecture::OneHidden { width } => {
            let m = model.input_dim();
            let w1 = &model.params()[..width * m];
            let emb = model.forward(x).embedding;
            let mut out = vec![T::zero(); m];
            for hdx in 0..width {
                let a = v[hdx] * (T::one() - emb[hdx] * emb[hdx]);
                for j in 0..m {
                    out[j] = out[j] + a * w1[hdx * m + j];
                }
            }
            out
        }
    }
}

struct Crafter<'a, T> {
    model: &'a ToyModel<T>,
    bases: Vec<(&'a [T], usize)>,
    target_grad: Vec<T>,
    target_embedding: Vec<T>,
}

impl<T: Real> Crafter<'_, T> {
    fn point(&self, i: usize, delta: &[T]) -> Vec<T> {
        self.bases[i].0.iter().zip(delta).map(|(&x, &d)| x + d).collect()
    }

    fn mean_poison_grad(&self, deltas: &[Vec<T>]) -> Vec<T> {
        let mut g = vec![T::zero(); self.model.params().len()];
        for (i, d) in deltas.iter().enumerate() {
            self.model.accumulate_example_grad(&self.point(i, d), self.bases[i].1, &mut g);
        }
        let scale = T::one() / T::lit(deltas.len() as f64);
        g.iter_mut().for_each(|x| *x = *x * scale);
        g
    }

    fn alignment(&self, deltas: &[Vec<T>]) -> f64 {
        cosine(&self.mean_poison_grad(deltas), &self.target_grad).map_or(0.0, Real::to_f64_lossy)
    }

    fn collision(&self, deltas: &[Vec<T>]) -> f64 {
        let total: T = deltas
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let e = self.model.forward(&self.point(i, d)).embedding;
                e.iter().zip(&self.target_embedding).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>()
            })
            .sum();
        -(total / T::lit(deltas.len() as f64)).to_f64_lossy()
    }

    fn value(&self, objective: AttackObjective, deltas: &[Vec<T>]) -> f64 {
        match objective {
            AttackObjective::GradientMatch => self.alignment(deltas),
            AttackObjective::FeatureCollision => self.collision(deltas),
        }
    }

    fn ascent_direction(&self, objective: AttackObjective, deltas: &[Vec<T>]) -> Vec<Vec<T>> {
        let p = T::lit(deltas.len() as f64);
        match objective {
            AttackObjective::GradientMatch => {
                let g = self.mean_poison_grad(deltas);
                let gn = norm(&g);
                let tn = norm(&self.target_grad);
                let u: Vec<T> = if gn > T::zero() {
                    let a = dot(&g, &self.target_grad) / (gn * tn);
                    g.iter().zip(&self.target_grad).map(|(&gi, &ti)| (ti / tn - a * gi / gn) / gn).collect()
                } else {
                    self.target_grad.iter().map(|&t| t / tn).collect()
                };
                deltas
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        input_grad_of_grad_dot(self.model, &self.point(i, d), self.bases[i].1, &u)
                            .into_iter()
                            .map(|v| v / p)
                            .collect()
                    })
                    .collect()
            }
            AttackObjective::FeatureCollision => deltas
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let e = self.model.forward(&self.point(i, d)).embedding;
                    let diff: Vec<T> =
                        e.iter().zip(&self.target_embedding).map(|(&a, &b)| -(T::lit(2.0)) * (a - b) / p).collect();
                    embedding_vjp(self.model, &self.point(i, d), &diff)
                })
                .collect(),
        }
    }
}

/// Crafts perturbations for `spec.base_indices` against a fixed surrogate.
pub fn craft<T: Real>(
    spec: &AttackSpec<T>,
    surrogate: &ToyModel<T>,
    data: &DatasetState<T>,
) -> Result<AttackResult<T>> {
    if !(spec.epsilon.is_finite() && spec.epsilon >= 0.0) {
        return Err(Error::invalid("epsilon must be finite and nonnegative"));
    }
    if spec.base_indices.is_empty() {
        return Err(Error::invalid("attack needs at least one base example"));
    }
    if spec.target.len() != data.dim() || surrogate.input_dim() != data.dim() {
        return Err(Error::invalid("target, surrogate and dataset dimensions disagree"));
    }
    if spec.adversarial_label >= data.classes() {
        return Err(Error::invalid("adversarial label out of range"));
    }
    if let Some(&bad) = spec.base_indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::invalid(format!("base index {bad} out of range")));
    }
    let (_, target_grad) = surrogate.example_grad(&spec.target, spec.adversarial_label);
    let tn = norm(&target_grad);
    if !tn.is_finite() || tn <= T::zero() {
        return Err(Error::DegenerateTarget);
    }
    let crafter = Crafter {
        model: surrogate,
        bases: spec.base_indices.iter().map(|&i| (data.x(i), data.label(i))).collect(),
        target_grad,
        target_embedding: surrogate.forward(&spec.target).embedding,
    };
    let mut deltas = vec![vec![T::zero(); data.dim()]; spec.base_indices.len()];
    let initial_alignment = crafter.alignment(&deltas);
    let mut objective_trace = Vec::with_capacity(spec.steps);
    let mut failures = 0;
    let eps = T::lit(spec.epsilon);
    let base_step = spec.step();

    if spec.epsilon > 0.0 && base_step > 0.0 {
        let mut current = crafter.value(spec.objective, &deltas);
        for _ in 0..spec.steps {
            let dir = crafter.ascent_direction(spec.objective, &deltas);
            let mut step = base_step;
            let mut accepted = false;
            for _ in 0..=BACKTRACK_HALVINGS {
                let s = T::lit(step);
                let trial: Vec<Vec<T>> = deltas
                    .iter()
                    .zip(&dir)
                    .map(|(d, g)| {
                        let mut nd: Vec<T> = d.iter().zip(g).map(|(&di, &gi)| di + s * sign(gi)).collect();
                        project_box(&mut nd, eps);
                        nd
                    })
                    .collect();
                let v = crafter.value(spec.objective, &trial);
                if v >= current {
                    deltas = trial;
                    current = v;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                failures += 1;
            }
            objective_trace.push(current);
        }
    }
    let final_alignment = crafter.alignment(&deltas);
    Ok(AttackResult {
        perturbations: deltas,
        initial_alignment,
        final_alignment,
        objective_trace,
        line_search_failures: failures,
        success: None,
    })
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Copy of `data` with the perturbations applied and the poison mask set.
pub fn apply_perturbations<T: Real>(
    data: &DatasetState<T>,
    base_indices: &[usize],
    perturbations: &[Vec<T>],
) -> Result<DatasetState<T>> {
    if base_indices.len() != perturbations.len() {
        return Err(Error::invalid("one perturbation per base example is required"));
    }
    let mut out = data.clone();
    let mut mask = data.poison_mask().map_or_else(|| vec![false; data.len()], <[bool]>::to_vec);
    for (&i, d) in base_indices.iter().zip(perturbations) {
        if i >= data.len() || d.len() != data.dim() {
            return Err(Error::invalid(format!("perturbation for {i} does not fit the dataset")));
        }
        for (x, &dx) in out.x_mut(i).iter_mut().zip(d) {
            *x = *x + dx;
        }
        mask[i] = true;
    }
    out.with_poison_mask(mask)
}

/// How a victim model is trained from scratch for each trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    #[serde(default)]
    pub arch: Architecture,
    pub schedule: LrSchedule,
    pub epochs: usize,
    /// Minibatch size; `None` trains full-batch. The shuffling seed comes from the trial.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub defense: Option<DefenseConfig>,
}

impl VictimConfig {
    pub fn undefended(&self) -> Self {
        Self { defense: None, ..self.clone() }
    }

    pub fn defended(&self, defense: DefenseConfig) -> Self {
        Self { defense: Some(defense), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimRun<T> {
    pub model: ToyModel<T>,
    pub trace: TrainTrace<T>,
    pub state: DatasetState<T>,
}

/// Trains one victim from a fresh seeded initialization.
pub fn train_victim<T: Real>(data: &DatasetState<T>, victim: &VictimConfig, seed: u64) -> Result<VictimRun<T>> {
    train_victim_observed(data, victim, seed, &mut |_, _, _| Ok(()))
}

/// [`train_victim`] with a hook called before every epoch's training pass.
pub fn train_victim_observed<T: Real>(
    data: &DatasetState<T>,
    victim: &VictimConfig,
    seed: u64,
    observer: &mut EpochObserver<'_, T>,
) -> Result<VictimRun<T>> {
    let mut model = ToyModel::init(victim.arch, data.classes(), data.dim(), derive_seed(seed, 1))?;
    let batch = match victim.batch_size {
        None => BatchMode::Full,
        Some(size) => BatchMode::Minibatch { size, seed: derive_seed(seed, 2) },
    };
    let mut trainer = Trainer::new(victim.schedule.clone(), batch)?;
    let mut state = data.clone();
    let trace = match &victim.defense {
        Some(cfg) => {
            let cfg = DefenseConfig { seed: derive_seed(seed, 3), ..cfg.clone() };
            run_defense_observed(&mut state, &mut model, &cfg, &mut trainer, victim.epochs, observer)?
        }
        None => {
            let mut trace = TrainTrace::default();
            for epoch in 0..victim.epochs {
                observer(epoch, &model, &state)?;
                trace.epochs.push(trainer.run_epoch(&mut model, &state, epoch)?);
            }
            trace
        }
    };
    Ok(VictimRun { model, trace, state })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub prediction: usize,
    pub success: bool,
    pub test_accuracy: Option<f64>,
    pub dropped: usize,
    pub dropped_poison: Option<usize>,
    pub rounds: Vec<RoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub success_rate: f64,
    pub mean_test_accuracy: Option<f64>,
    pub trials: Vec<TrialOutcome>,
}

/// Fraction of seeded victim trainings that classify the target as `y_adv`.
pub fn evaluate_attack<T: Real>(
    poisoned: &DatasetState<T>,
    victim: &VictimConfig,
    target: &[T],
    adversarial_label: usize,
    seeds: &[u64],
    test: Option<&DatasetState<T>>,
) -> Result<AttackOutcome> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one trial is required"));
    }
    let trials: Vec<TrialOutcome> = seeds
        .par_iter()
        .map(|&seed| {
            let run = train_victim(poisoned, victim, seed)?;
            let prediction = run.model.predict(target);
            let test_accuracy = test.map(|t| evaluate(&run.model, t, &t.all_indices()).1);
            let dropped_poison =
                poisoned.poison_mask().map(|m| run.state.dropped().iter().filter(|d| m[d.index]).count());
            Ok(TrialOutcome {
                seed,
                prediction,
                success: prediction == adversarial_label,
                test_accuracy,
                dropped: run.state.dropped().len(),
                dropped_poison,
                rounds: run.trace.rounds,
            })
        })
        .collect::<Result<_>>()?;
    let success_rate = trials.iter().filter(|t| t.success).count() as f64 / trials.len() as f64;
    let mean_test_accuracy =
        test.map(|_| trials.iter().filter_map(|t| t.test_accuracy).sum::<f64>() / trials.len() as f64);
    Ok(AttackOutcome { success_rate, mean_test_accuracy, trials })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSearch {
    Exhaustive,
    GreedyAblation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSubset {
    /// Base indices of the effective poisons, ascending.
    pub members: Vec<usize>,
    /// Distinct poison subsets whose attack outcome was evaluated.
    pub evaluations: usize,
}

/// Poison subsets tried against seeded victims. An attack with a subset
/// "succeeds" when more than half of the seeds flip the target.
pub struct SubsetOracle<'a, T> {
    clean: &'a DatasetState<T>,
    bases: Vec<(usize, Vec<T>)>,
    victim: &'a VictimConfig,
    target: &'a [T],
    adversarial_label: usize,
    seeds: &'a [u64],
    memo: HashMap<u32, bool>,
}

impl<'a, T: Real> SubsetOracle<'a, T> {
    pub fn new(
        clean: &'a DatasetState<T>,
        base_indices: &[usize],
        perturbations: &[Vec<T>],
        victim: &'a VictimConfig,
        target: &'a [T],
        adversarial_label: usize,
        seeds: &'a [u64],
    ) -> Result<Self> {
        if base_indices.len() != perturbations.len() {
            return Err(Error::invalid("one perturbation per base example is required"));
        }
        if base_indices.len() > 32 {
            return Err(Error::invalid("subset oracle supports at most 32 poisons"));
        }
        let mut bases: Vec<(usize, Vec<T>)> = base_indices.iter().copied().zip(perturbations.iter().cloned()).collect();
        bases.sort_by_key(|b| b.0);
        Ok(Self { clean, bases, victim, target, adversarial_label, seeds, memo: HashMap::new() })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn full_mask(&self) -> u32 {
        if self.bases.len() == 32 {
            u32::MAX
        } else {
            (1u32 << self.bases.len()) - 1
        }
    }

    pub fn members(&self, mask: u32) -> Vec<usize> {
        (0..self.bases.len()).filter(|b| mask & (1 << b) != 0).map(|b| self.bases[b].0).collect()
    }

    pub fn succeeds(&mut self, mask: u32) -> Result<bool> {
        if let Some(&v) = self.memo.get(&mask) {
            return Ok(v);
        }
        let (idx, pert): (Vec<usize>, Vec<Vec<T>>) =
            (0..self.bases.len()).filter(|b| mask & (1 << b) != 0).map(|b| self.bases[b].clone()).unzip();
        let data = apply_perturbations(self.clean, &idx, &pert)?;
        let outcome = evaluate_attack(&data, self.victim, self.target, self.adversarial_label, self.seeds, None)?;
        let ok = outcome.success_rate > 0.5;
        self.memo.insert(mask, ok);
        Ok(ok)
    }

    /// Succeeds with exactly `mask` present and fails with only its complement.
    pub fn is_effective(&mut self, mask: u32) -> Result<bool> {
        Ok(self.succeeds(mask)? && !self.succeeds(self.full_mask() & !mask)?)
    }

    pub fn evaluations(&self) -> usize {
        self.memo.len()
    }
}

/// Smallest poison subset that carries the attack (see [`SubsetOracle::is_effective`]).
pub fn find_effective_subset<T: Real>(oracle: &mut SubsetOracle<'_, T>, mode: SubsetSearch) -> Result<EffectiveSubset> {
    let n = oracle.len();
    if n == 0 {
        return Err(Error::invalid("poison set is empty"));
    }
    if !oracle.succeeds(oracle.full_mask())? {
        return Err(Error::NoEffectiveSubset);
    }
    let mask = match mode {
        SubsetSearch::Exhaustive => {
            if n > EXHAUSTIVE_SUBSET_LIMIT {
                return Err(Error::InstanceTooLarge { size: n, limit: EXHAUSTIVE_SUBSET_LIMIT });
            }
            let mut found = None;
            'sizes: for size in 1..=n {
                for combo in combinations(n, size) {
                    let m = combo.iter().fold(0u32, |acc, &b| acc | (1 << b));
                    if oracle.is_effective(m)? {
                        found = Some(m);
                        break 'sizes;
                    }
                }
            }
            found.ok_or(Error::NoEffectiveSubset)?
        }
        SubsetSearch::GreedyAblation => {
            let mut current = oracle.full_mask();
            if !oracle.is_effective(current)? {
                return Err(Error::NoEffectiveSubset);
            }
            for b in 0..n {
                let trial = current & !(1 << b);
                if trial != 0 && oracle.is_effective(trial)? {
                    current = trial;
                }
            }
            current
        }
    };
    Ok(EffectiveSubset { members: oracle.members(mask), evaluations: oracle.evaluations() })
}

/// All `size`-combinations of `0..n` in lexicographic order.
fn combinations(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut next = (size <= n).then(|| (0..size).collect::<Vec<_>>());
    std::iter::from_fn(move || {
        let current = next.take()?;
        let mut c = current.clone();
        let mut i = size;
        while i > 0 {
            i -= 1;
            if c[i] < n - size + i {
                c[i] += 1;
                for j in i + 1..size {
                    c[j] = c[j - 1] + 1;
                }
                next = Some(c);
                break;
            }
        }
        Some(current)
    })
}
