//! Numerical checks of the convergence guarantee for training on a pruned set.
//!
//! Under the μ-PL* condition `½‖∇L(θ)‖² ≥ μ·L(θ)`, gradient descent with a
//! constant step `η` on a subset whose gradient differs from the full
//! gradient by at most `ρ` satisfies
//!
//! ```text
//! L(θ_t) ≤ (1 − ημ)^t · L(θ_0) − (ρ² − 2ρ·∇max) / (2μ)
//! ```
//!
//! where `∇max` bounds the full-gradient norm along the trajectory. Here the
//! three constants are measured from an instrumented run and the bound is
//! checked epoch by epoch. The contraction and additive terms are reported
//! separately.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetState, DropRecord};
use crate::epic_defense::{elimination_round, DefenseConfig};
use crate::error::{Error, Result};
use crate::rng::{sample_without_replacement, seeded};
use crate::scalar::{l2_distance, norm, Real};
use crate::toy_trainer::{extract_proxies, gd_update, loss_and_grad, ToyModel};

pub const BOUND_TOLERANCE: f64 = 1e-9;

/// A differentiable loss with a known minimum value.
pub trait LossSurface<T: Real> {
    fn loss(&self, theta: &[T]) -> T;
    fn grad(&self, theta: &[T]) -> Vec<T>;
    fn min_loss(&self) -> T {
        T::zero()
    }
}

/// `L(θ) = ½·a·‖θ‖²`, which is exactly `a`-PL*.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadratic<T> {
    pub a: T,
}

impl<T: Real> LossSurface<T> for Quadratic<T> {
    fn loss(&self, theta: &[T]) -> T {
        T::lit(0.5) * self.a * theta.iter().map(|&x| x * x).sum::<T>()
    }

    fn grad(&self, theta: &[T]) -> Vec<T> {
        theta.iter().map(|&x| self.a * x).collect()
    }
}

impl<T: Real> Quadratic<T> {
    /// GD iterates `θ_{t+1} = (1 − ηa)·θ_t` for `steps` steps, `θ_0` included.
    pub fn trajectory(&self, theta0: &[T], eta: T, steps: usize) -> Vec<Vec<T>> {
        let mut out = Vec::with_capacity(steps + 1);
        let mut theta = theta0.to_vec();
        out.push(theta.clone());
        for _ in 0..steps {
            let g = self.grad(&theta);
            theta = theta.iter().zip(&g).map(|(&p, &gi)| p - eta * gi).collect();
            out.push(theta.clone());
        }
        out
    }

    pub fn certificate(&self) -> PLCertificate {
        PLCertificate {
            mu: self.a.to_f64_lossy(),
            method: PlMethod::Analytic,
            region: "all of parameter space".into(),
            witness: None,
            points: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlMethod {
    Analytic,
    /// Minimum of `½‖g‖² / (L − L*)` over the checked points.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PLCertificate {
    pub mu: f64,
    pub method: PlMethod,
    pub region: String,
    /// Trajectory index attaining the minimum ratio.
    pub witness: Option<usize>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PlOutcome {
    Certified(PLCertificate),
    Violation { index: usize, loss: f64, grad_norm: f64 },
}

impl PlOutcome {
    pub fn mu(&self) -> Option<f64> {
        match self {
            PlOutcome::Certified(c) => Some(c.mu),
            PlOutcome::Violation { .. } => None,
        }
    }
}

/// Largest μ such that `½‖g‖² ≥ μ·(L − L*)` at every sample `(L, ‖g‖)`.
pub fn check_pl<T: Real>(samples: &[(T, T)], min_loss: T) -> Result<PlOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("trajectory is empty"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (index, &(loss, grad_norm)) in samples.iter().enumerate() {
        if !(loss.is_finite() && grad_norm.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at trajectory point {index}")));
        }
        if loss < min_loss {
            return Err(Error::InvalidSurface { index, loss: loss.to_f64_lossy(), min: min_loss.to_f64_lossy() });
        }
        let excess = (loss - min_loss).to_f64_lossy();
        if excess == 0.0 {
            continue;
        }
        let g = grad_norm.to_f64_lossy();
        let ratio = 0.5 * g * g / excess;
        if ratio <= 0.0 {
            return Ok(PlOutcome::Violation { index, loss: loss.to_f64_lossy(), grad_norm: g });
        }
        if best.is_none_or(|(_, b)| ratio < b) {
            best = Some((index, ratio));
        }
    }
    let Some((witness, mu)) = best else {
        return Err(Error::invalid("every trajectory point sits at the minimum; μ is unconstrained"));
    };
    Ok(PlOutcome::Certified(PLCertificate {
        mu,
        method: PlMethod::Empirical,
        region: format!("{} recorded trajectory points", samples.len()),
        witness: Some(witness),
        points: samples.len(),
    }))
}

/// [`check_pl`] on a surface evaluated along parameter iterates.
pub fn check_pl_surface<T: Real, S: LossSurface<T>>(surface: &S, trajectory: &[Vec<T>]) -> Result<PlOutcome> {
    let samples: Vec<(T, T)> = trajectory.iter().map(|th| (surface.loss(th), norm(&surface.grad(th)))).collect();
    check_pl(&samples, surface.min_loss())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropPerturbation {
    /// `max_t ‖g_t − g_t^S‖`.
    pub rho: f64,
    /// `max_t ‖g_t‖`.
    pub grad_max: f64,
}

pub fn measure_rho<T: Real>(full: &[Vec<T>], subset: &[Vec<T>]) -> Result<DropPerturbation> {
    if full.len() != subset.len() {
        return Err(Error::invalid(format!("{} full gradients but {} subset gradients", full.len(), subset.len())));
    }
    let mut rho = 0.0f64;
    let mut grad_max = 0.0f64;
    for (g, gs) in full.iter().zip(subset) {
        if g.len() != gs.len() {
            return Err(Error::invalid("gradient widths differ"));
        }
        rho = rho.max(l2_distance(g, gs).to_f64_lossy());
        grad_max = grad_max.max(norm(g).to_f64_lossy());
    }
    Ok(DropPerturbation { rho, grad_max })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub t: usize,
    pub loss: f64,
    pub contraction: f64,
    pub additive: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub mu: f64,
    pub rho: f64,
    pub grad_max: f64,
    pub eta: f64,
    pub tolerance: f64,
    pub checks: Vec<BoundCheck>,
    pub fraction_holding: f64,
}

impl TheoremCheck {
    pub fn all_hold_from(&self, t0: usize) -> bool {
        self.checks.iter().filter(|c| c.t >= t0).all(|c| c.holds)
    }
}

/// Checks `losses[t] ≤ (1−ημ)^t·losses[0] − (ρ² − 2ρ∇max)/(2μ)` for every `t`.
pub fn verify_theorem1(
    losses: &[f64],
    mu: f64,
    rho: f64,
    grad_max: f64,
    eta: f64,
    tolerance: f64,
) -> Result<TheoremCheck> {
    let eta_mu = eta * mu;
    if !(eta_mu > 0.0 && eta_mu < 1.0) {
        return Err(Error::OutOfRegime { eta_mu });
    }
    if losses.is_empty() {
        return Err(Error::invalid("loss series is empty"));
    }
    if rho < 0.0 || grad_max < 0.0 {
        return Err(Error::invalid("ρ and ∇max must be nonnegative"));
    }
    let l0 = losses[0];
    let additive = -(rho * rho - 2.0 * rho * grad_max) / (2.0 * mu);
    let checks: Vec<BoundCheck> = losses
        .iter()
        .enumerate()
        .map(|(t, &loss)| {
            let contraction = (1.0 - eta_mu).powi(t as i32) * l0;
            let bound = contraction + additive;
            BoundCheck { t, loss, contraction, additive, bound, holds: loss <= bound + tolerance }
        })
        .collect();
    let fraction_holding = checks.iter().filter(|c| c.holds).count() as f64 / checks.len() as f64;
    Ok(TheoremCheck { mu, rho, grad_max, eta, tolerance, checks, fraction_holding })
}

/// Which examples to remove during an instrumented run.
#[derive(Debug, Clone, PartialEq)]
pub enum DropPolicy {
    None,
    Epic(DefenseConfig),
    /// At each listed epoch, drop this many uniformly random active members
    /// of each listed class: `(epoch, class, count)`.
    Random {
        schedule: Vec<(usize, usize, usize)>,
        seed: u64,
    },
}

/// Full-batch GD trajectory recording full-data and active-set gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentedRun {
    pub eta: f64,
    /// Full-data loss at `θ_0 … θ_T`.
    pub losses: Vec<f64>,
    /// Full-data gradient at `θ_0 … θ_T`.
    pub full_grads: Vec<Vec<f64>>,
    /// Active-set gradient at `θ_0 … θ_{T−1}` (the descent directions).
    pub subset_grads: Vec<Vec<f64>>,
    pub drops: Vec<DropRecord>,
    pub first_drop_epoch: Option<usize>,
}

impl InstrumentedRun {
    pub fn perturbation(&self) -> Result<DropPerturbation> {
        let n = self.subset_grads.len();
        let rho = measure_rho(&self.full_grads[..n], &self.subset_grads)?;
        let grad_max = self.full_grads.iter().map(|g| norm(g)).fold(0.0, f64::max);
        Ok(DropPerturbation { rho: rho.rho, grad_max })
    }

    /// `(epoch, class, count)` triples describing the drops.
    pub fn drop_schedule(&self) -> Vec<(usize, usize, usize)> {
        let mut counts: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
        for d in &self.drops {
            *counts.entry((d.epoch, d.class)).or_default() += 1;
        }
        counts.into_iter().map(|((e, c), k)| (e, c, k)).collect()
    }

    pub fn pl_samples(&self) -> Vec<(f64, f64)> {
        self.losses.iter().zip(&self.full_grads).map(|(&l, g)| (l, norm(g))).collect()
    }
}

pub fn instrumented_run(
    data: &DatasetState<f64>,
    model: &ToyModel<f64>,
    eta: f64,
    epochs: usize,
    policy: &DropPolicy,
) -> Result<InstrumentedRun> {
    let mut state = data.clone();
    let mut model = model.clone();
    let universe = state.all_indices();
    let mut rng = match policy {
        DropPolicy::Random { seed, .. } => Some(seeded(*seed)),
        _ => None,
    };
    let mut run = InstrumentedRun {
        eta,
        losses: Vec::with_capacity(epochs + 1),
        full_grads: Vec::with_capacity(epochs + 1),
        subset_grads: Vec::with_capacity(epochs),
        drops: Vec::new(),
        first_drop_epoch: None,
    };
    for epoch in 0..epochs {
        let drops = match policy {
            DropPolicy::None => Vec::new(),
            DropPolicy::Epic(cfg) if cfg.is_round_epoch(epoch) => {
                let proxies = extract_proxies(&model, &state, cfg.proxy_mode)?;
                elimination_round(&state, &proxies, cfg, epoch)?.dropped
            }
            DropPolicy::Epic(_) => Vec::new(),
            DropPolicy::Random { schedule, .. } => {
                let rng = rng.as_mut().expect("random policy owns a generator");
                let mut out = Vec::new();
                for &(_, class, count) in schedule.iter().filter(|s| s.0 == epoch) {
                    let positions = state.class_positions(class);
                    for pick in sample_without_replacement(rng, positions.len(), count) {
                        let index = state.active()[positions[pick]];
                        out.push(DropRecord { index, epoch, class, medoid_rank: 0 });
                    }
                }
                out.sort_by_key(|r| r.index);
                out
            }
        };
        if !drops.is_empty() {
            state.drop_examples(&drops)?;
            run.first_drop_epoch.get_or_insert(epoch);
            run.drops.extend(drops);
        }
        let (loss, full) = loss_and_grad(&model, &state, &universe)?;
        let (_, subset) = loss_and_grad(&model, &state, state.active())?;
        let next =
            gd_update(model.params(), &subset, eta).map_err(|_| Error::NumericalDivergence { epoch: Some(epoch) })?;
        run.losses.push(loss);
        run.full_grads.push(full);
        run.subset_grads.push(subset);
        model = model.with_params(next)?;
    }
    let (loss, full) = loss_and_grad(&model, &state, &universe)?;
    run.losses.push(loss);
    run.full_grads.push(full);
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub pl: PlOutcome,
    pub perturbation: DropPerturbation,
    pub check: Option<TheoremCheck>,
    pub first_drop_epoch: Option<usize>,
    pub dropped: usize,
}

/// Measures μ, ρ and ∇max from the run itself and checks the bound.
pub fn theorem_report(run: &InstrumentedRun, tolerance: f64) -> Result<TheoremReport> {
    let pl = check_pl(&run.pl_samples(), 0.0)?;
    let perturbation = run.perturbation()?;
    let check = match pl.mu() {
        Some(mu) => {
            Some(verify_theorem1(&run.losses, mu, perturbation.rho, perturbation.grad_max, run.eta, tolerance)?)
        }
        None => None,
    };
    Ok(TheoremReport { pl, perturbation, check, first_drop_epoch: run.first_drop_epoch, dropped: run.drops.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_certificate_is_exact() {
        let q = Quadratic { a: 3.0f64 };
        let traj = q.trajectory(&[1.0, -2.0], 0.1, 20);
        let PlOutcome::Certified(c) = check_pl_surface(&q, &traj).unwrap() else { panic!("violation") };
        assert!((c.mu - 3.0).abs() < 1e-12);
        assert_eq!(q.certificate().mu, 3.0);
    }

    #[test]
    fn plateau_is_a_violation() {
        let out = check_pl(&[(1.0f64, 0.5), (0.7, 0.0)], 0.0).unwrap();
        assert!(matches!(out, PlOutcome::Violation { index: 1, .. }));
        assert!(matches!(check_pl(&[(-0.1f64, 1.0)], 0.0), Err(Error::InvalidSurface { .. })));
        assert!(check_pl::<f64>(&[], 0.0).is_err());
    }

    #[test]
    fn pl_is_order_invariant() {
        let s = vec![(1.0f64, 2.0), (0.5, 0.4), (0.2, 0.5), (0.05, 0.2)];
        let mut r = s.clone();
        r.reverse();
        assert_eq!(check_pl(&s, 0.0).unwrap().mu(), check_pl(&r, 0.0).unwrap().mu());
    }

    #[test]
    fn theorem_regime_and_t0_identity() {
        assert!(matches!(verify_theorem1(&[1.0], 2.0, 0.0, 1.0, 0.5, 0.0), Err(Error::OutOfRegime { .. })));
        let c = verify_theorem1(&[1.0], 0.5, 0.3, 1.0, 0.1, 0.0).unwrap();
        // t = 0: L0 − (ρ² − 2ρ∇max)/(2μ) ≥ L0 because ρ ≤ 2∇max.
        assert!(c.checks[0].bound >= 1.0);
        assert!(c.checks[0].holds);
    }

    #[test]
    fn rho_edge_cases() {
        let g = vec![vec![1.0f64, 2.0], vec![0.5, -0.5]];
        let p = measure_rho(&g, &g).unwrap();
        assert_eq!(p.rho, 0.0);
        assert!((p.grad_max - 5f64.sqrt()).abs() < 1e-15);
        assert!(measure_rho(&g, &g[..1]).is_err());
    }
}
