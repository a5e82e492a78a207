mod common;

use common::rng;
use epic_core::data::{BlobSpec, DatasetState};
use epic_core::poison_forge::{
    apply_perturbations, craft, evaluate_attack, find_effective_subset, project_box, train_victim, AttackObjective,
    AttackSpec, SubsetOracle, SubsetSearch, VictimConfig,
};
use epic_core::scalar::cosine;
use epic_core::toy_trainer::{Architecture, LrSchedule, ToyModel};
use epic_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn blobs(seed: u64) -> DatasetState<f64> {
    BlobSpec { classes: 2, dim: 2, per_class: 60, spread: 1.0, separation: 2.5 }.generate(seed).unwrap()
}

fn victim() -> VictimConfig {
    VictimConfig {
        arch: Architecture::Linear,
        schedule: LrSchedule::constant(0.2),
        epochs: 40,
        batch_size: None,
        defense: None,
    }
}

fn surrogate(data: &DatasetState<f64>) -> ToyModel<f64> {
    train_victim(data, &victim(), 99).unwrap().model
}

fn spec(bases: Vec<usize>, target: Vec<f64>, epsilon: f64, steps: usize) -> AttackSpec<f64> {
    AttackSpec {
        base_indices: bases,
        target,
        adversarial_label: 1,
        epsilon,
        steps,
        step_size: None,
        objective: AttackObjective::GradientMatch,
    }
}

fn class_members(data: &DatasetState<f64>, class: usize) -> Vec<usize> {
    (0..data.len()).filter(|&i| data.label(i) == class).collect()
}

#[test]
fn empty_box_and_zero_steps_leave_bases_untouched() {
    let data = blobs(1);
    let model = surrogate(&data);
    let bases = class_members(&data, 1)[..4].to_vec();
    for (eps, steps) in [(0.0, 250), (0.5, 0)] {
        let r = craft(&spec(bases.clone(), vec![0.5, 0.2], eps, steps), &model, &data).unwrap();
        assert!(r.perturbations.iter().flatten().all(|&d| d == 0.0));
        assert_eq!(r.final_alignment, r.initial_alignment);
    }
}

#[test]
fn single_poison_alignment_matches_grid_search() {
    let data = blobs(2);
    let model = surrogate(&data);
    let mut r = rng(3);
    for case in 0..5 {
        let base = class_members(&data, 1)[case];
        let target = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let eps = 0.5;
        let crafted = craft(&spec(vec![base], target.clone(), eps, 250), &model, &data).unwrap();
        let (_, tg) = model.example_grad(&target, 1);
        let x = data.x(base);
        let mut best = f64::NEG_INFINITY;
        for a in 0..=200 {
            for b in 0..=200 {
                let p = [x[0] - eps + eps * a as f64 / 100.0, x[1] - eps + eps * b as f64 / 100.0];
                let (_, g) = model.example_grad(&p, data.label(base));
                best = best.max(cosine(&g, &tg).unwrap());
            }
        }
        assert!(
            (crafted.final_alignment - best).abs() < 0.02,
            "case {case}: {} vs grid {best}",
            crafted.final_alignment
        );
    }
}

#[test]
fn zero_target_gradient_is_degenerate() {
    let data = blobs(4);
    // Saturated logits make the softmax exactly one-hot in floating point.
    let params = vec![0.0, 0.0, 0.0, 0.0, -1000.0, 1000.0];
    let model = ToyModel::from_params(Architecture::Linear, 2, 2, params).unwrap();
    let err = craft(&spec(vec![0], vec![0.0, 0.0], 0.5, 10), &model, &data).unwrap_err();
    assert!(matches!(err, Error::DegenerateTarget));
}

#[test]
fn feature_collision_moves_bases_toward_the_target_embedding() {
    let data = blobs(5);
    let model = ToyModel::init(Architecture::OneHidden { width: 6 }, 2, 2, 3).unwrap();
    let bases = class_members(&data, 1)[..3].to_vec();
    let s = AttackSpec { objective: AttackObjective::FeatureCollision, ..spec(bases, vec![2.0, 0.0], 0.8, 100) };
    let r = craft(&s, &model, &data).unwrap();
    assert!(r.objective_trace.windows(2).all(|w| w[1] >= w[0]));
    assert!(r.objective_trace.last().unwrap() > &r.objective_trace[0] || r.line_search_failures == 100);
    assert!(r.perturbations.iter().flatten().all(|d| d.abs() <= 0.8));
}

#[test]
fn clean_confident_target_is_never_flipped() {
    let data = blobs(6);
    let bases = class_members(&data, 1)[..5].to_vec();
    let zero = vec![vec![0.0; 2]; 5];
    let poisoned = apply_perturbations(&data, &bases, &zero).unwrap();
    let target = BlobSpec { classes: 2, dim: 2, per_class: 1, spread: 1.0, separation: 2.5 }.center(0);
    let seeds = [1, 2, 3, 4];
    let out = evaluate_attack(&poisoned, &victim(), &target, 1, &seeds, None).unwrap();
    assert_eq!(out.success_rate, 0.0);
    let again = evaluate_attack(&poisoned, &victim(), &target, 1, &seeds, None).unwrap();
    assert_eq!(out, again);
    let vacuous = evaluate_attack(&poisoned, &victim(), &target, 0, &seeds, None).unwrap();
    assert_eq!(vacuous.success_rate, 1.0);
    assert!(matches!(evaluate_attack(&poisoned, &victim(), &target, 1, &[], None), Err(Error::InvalidInput(_))));
}

#[test]
fn no_subset_succeeds_when_the_full_set_fails() {
    let data = blobs(7);
    let bases = class_members(&data, 1)[..3].to_vec();
    let zero = vec![vec![0.0; 2]; 3];
    let target = vec![2.5, 0.0];
    let v = victim();
    let seeds = [1u64];
    let mut oracle = SubsetOracle::new(&data, &bases, &zero, &v, &target, 1, &seeds).unwrap();
    assert!(matches!(find_effective_subset(&mut oracle, SubsetSearch::Exhaustive), Err(Error::NoEffectiveSubset)));
}

fn converged_victim() -> VictimConfig {
    VictimConfig { schedule: LrSchedule::constant(0.5), epochs: 400, ..victim() }
}

const SUBSET_SEEDS: [u64; 3] = [1, 2, 3];

/// Target just on the class-0 side of every clean victim, one poison moved onto it,
/// three poisons jittered by a tenth of that displacement in unrelated directions.
fn dominant_poison_setup() -> (DatasetState<f64>, Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let data = blobs(8);
    let cleans: Vec<ToyModel<f64>> =
        SUBSET_SEEDS.iter().map(|&s| train_victim(&data, &converged_victim(), s).unwrap().model).collect();
    let margin = |x: f64| {
        cleans
            .iter()
            .map(|m| {
                let l = m.forward(&[x, 0.0]).logits;
                l[0] - l[1]
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (mut lo, mut hi) = (-2.5, 2.5);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if margin(mid) > 0.005 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let target = vec![hi, 0.0];
    let mut ones = class_members(&data, 1);
    ones.sort_by(|&a, &b| common::euclid(data.x(a), &target).total_cmp(&common::euclid(data.x(b), &target)));
    let bases: Vec<usize> = ones[..4].to_vec();
    let to_target: Vec<f64> = target.iter().zip(data.x(bases[0])).map(|(t, x)| t - x).collect();
    let jitter = 0.1 * to_target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let perts = vec![to_target, vec![-jitter, 0.0], vec![0.0, jitter], vec![0.0, -jitter]];
    (data, bases, perts, target)
}

fn mask_of(sorted: &[usize], members: &[usize]) -> u32 {
    members.iter().fold(0, |m, b| m | 1 << sorted.iter().position(|x| x == b).unwrap())
}

#[test]
fn dominant_poison_is_the_effective_singleton() {
    let (data, bases, perts, target) = dominant_poison_setup();
    let v = converged_victim();
    let mut oracle = SubsetOracle::new(&data, &bases, &perts, &v, &target, 1, &SUBSET_SEEDS).unwrap();
    let dominant = bases[0];
    let mut sorted = bases.clone();
    sorted.sort_unstable();
    let slot = mask_of(&sorted, &[dominant]);
    assert!(!oracle.succeeds(0).unwrap());
    for mask in 1u32..16 {
        assert_eq!(oracle.succeeds(mask).unwrap(), mask & slot != 0, "mask {mask:04b}");
    }
    let found = find_effective_subset(&mut oracle, SubsetSearch::Exhaustive).unwrap();
    assert_eq!(found.members, vec![dominant]);
    let greedy = find_effective_subset(&mut oracle, SubsetSearch::GreedyAblation).unwrap();
    assert_eq!(greedy.members, vec![dominant]);
    let mask = mask_of(&sorted, &found.members);
    assert!(oracle.succeeds(mask).unwrap());
    assert!(!oracle.succeeds(oracle.full_mask() & !mask).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn crafting_respects_the_box_and_never_loses_alignment(
        seed in 0u64..500,
        eps in 0.0f64..1.5,
        steps in 0usize..60,
        hidden in any::<bool>(),
    ) {
        let data = blobs(seed);
        let arch = if hidden { Architecture::OneHidden { width: 4 } } else { Architecture::Linear };
        let model = ToyModel::init(arch, 2, 2, seed).unwrap();
        let bases = class_members(&data, 1)[..3].to_vec();
        let r = craft(&spec(bases, vec![1.0, 0.5], eps, steps), &model, &data).unwrap();
        for d in &r.perturbations {
            prop_assert!(d.iter().all(|v| v.abs() <= eps));
            let mut p = d.clone();
            project_box(&mut p, eps);
            prop_assert_eq!(&p, d);
        }
        prop_assert!(r.objective_trace.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(r.final_alignment >= r.initial_alignment);
        prop_assert!((-1.0..=1.0).contains(&r.final_alignment));
    }
}
