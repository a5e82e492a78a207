mod common;

use epic_core::data::{BlobSpec, DatasetState};
use epic_core::epic_defense::DefenseConfig;
use epic_core::theory_bench::{
    check_pl, check_pl_surface, instrumented_run, measure_rho, theorem_report, verify_theorem1, DropPolicy,
    LossSurface, PlOutcome, Quadratic, BOUND_TOLERANCE,
};
use epic_core::toy_trainer::{loss_and_grad, Architecture};
use epic_core::{Error, ToyModel};
use proptest::prelude::*;

fn blobs(seed: u64) -> DatasetState<f64> {
    BlobSpec { classes: 2, dim: 2, per_class: 40, spread: 1.0, separation: 3.0 }.generate(seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_matches_closed_form(
        a in 0.1f64..4.0,
        r in 0.01f64..0.9,
        theta0 in prop::collection::vec(-3.0f64..3.0, 1..5),
    ) {
        prop_assume!(theta0.iter().any(|&x| x.abs() > 1e-3));
        let eta = r / a;
        let q = Quadratic { a };
        let traj = q.trajectory(&theta0, eta, 30);
        let l0 = 0.5 * a * theta0.iter().map(|x| x * x).sum::<f64>();
        let losses: Vec<f64> = traj.iter().map(|th| q.loss(th)).collect();
        for (t, th) in traj.iter().enumerate() {
            let k = (1.0 - eta * a).powi(t as i32);
            for (x, x0) in th.iter().zip(&theta0) {
                prop_assert!((x - k * x0).abs() <= 1e-12 * x0.abs().max(1.0));
            }
            prop_assert!((losses[t] - k * k * l0).abs() <= 1e-12 * l0.max(1.0));
        }
        let PlOutcome::Certified(cert) = check_pl_surface(&q, &traj).unwrap() else {
            return Err(TestCaseError::fail("quadratic reported a violation"));
        };
        prop_assert!((cert.mu - a).abs() <= 1e-12 * a);
        let check = verify_theorem1(&losses, cert.mu, 0.0, 0.0, eta, 0.0).unwrap();
        for c in &check.checks {
            let expected = (1.0 - eta * a).powi(c.t as i32) * l0;
            prop_assert!((c.bound - expected).abs() <= 1e-12 * l0.max(1.0));
            prop_assert!(c.holds || c.loss - c.bound <= 1e-12 * l0);
        }
    }

    #[test]
    fn rho_is_the_largest_gradient_gap(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..10),
        shift in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let dim = 3;
        let full: Vec<Vec<f64>> = rows.iter().map(|r| r[..dim].to_vec()).collect();
        let subset: Vec<Vec<f64>> =
            rows.iter().map(|r| r[..dim].iter().zip(&r[dim..]).map(|(a, b)| a + b * shift[0]).collect()).collect();
        let p = measure_rho(&full, &subset).unwrap();
        let rho = full.iter().zip(&subset).map(|(g, s)| common::euclid(g, s)).fold(0.0, f64::max);
        let gmax = full.iter().map(|g| common::euclid(g, &[0.0; 3])).fold(0.0, f64::max);
        prop_assert!((p.rho - rho).abs() <= 1e-12 * rho.max(1.0));
        prop_assert!((p.grad_max - gmax).abs() <= 1e-12 * gmax.max(1.0));
    }
}

#[test]
fn bound_at_t0_is_the_initial_loss_plus_the_additive_term() {
    let c = verify_theorem1(&[2.0, 1.5, 1.2], 0.4, 0.5, 1.0, 0.5, 0.0).unwrap();
    let additive = -(0.25 - 1.0) / 0.8;
    assert_eq!(c.checks[0].contraction, 2.0);
    assert!((c.checks[0].additive - additive).abs() < 1e-15);
    assert!((c.checks[2].contraction - 0.8 * 0.8 * 2.0).abs() < 1e-15);
    assert_eq!(c.fraction_holding, 1.0);
}

#[test]
fn violations_are_counted() {
    let c = verify_theorem1(&[1.0, 1.0, 1.0, 1.0], 0.5, 0.0, 0.0, 1.0, 0.0).unwrap();
    let held: Vec<bool> = c.checks.iter().map(|b| b.holds).collect();
    assert_eq!(held, vec![true, false, false, false]);
    assert_eq!(c.fraction_holding, 0.25);
    assert!(!c.all_hold_from(1));
    assert!(c.all_hold_from(4));
}

#[test]
fn regime_and_input_checks() {
    for (mu, eta) in [(2.0, 0.5), (0.0, 0.1), (1.0, 1.5)] {
        assert!(matches!(verify_theorem1(&[1.0], mu, 0.0, 0.0, eta, 0.0), Err(Error::OutOfRegime { .. })));
    }
    assert!(matches!(verify_theorem1(&[], 0.5, 0.0, 0.0, 0.1, 0.0), Err(Error::InvalidInput(_))));
    let g = vec![vec![1.0f64, 0.0]];
    assert!(matches!(measure_rho(&g, &[]), Err(Error::InvalidInput(_))));
    assert_eq!(measure_rho(&g, &g).unwrap().rho, 0.0);
    assert!(matches!(check_pl(&[(0.5f64, 1.0), (0.2, 0.0)], 0.0), Ok(PlOutcome::Violation { index: 1, .. })));
}

#[test]
fn pl_constant_ignores_sample_order() {
    let data = blobs(1);
    let model = ToyModel::init(Architecture::Linear, 2, 2, 1).unwrap();
    let run = instrumented_run(&data, &model, 0.1, 30, &DropPolicy::None).unwrap();
    let samples = run.pl_samples();
    let mut shuffled = samples.clone();
    shuffled.rotate_left(7);
    shuffled.reverse();
    assert_eq!(check_pl(&samples, 0.0).unwrap().mu(), check_pl(&shuffled, 0.0).unwrap().mu());
}

#[test]
fn undisturbed_run_has_zero_rho_and_positive_mu() {
    let data = blobs(2);
    let model = ToyModel::init(Architecture::Linear, 2, 2, 2).unwrap();
    let run = instrumented_run(&data, &model, 0.1, 40, &DropPolicy::None).unwrap();
    assert_eq!(run.losses.len(), 41);
    assert_eq!(&run.full_grads[..40], &run.subset_grads[..]);
    assert!(run.losses.windows(2).all(|w| w[1] <= w[0]));
    let report = theorem_report(&run, BOUND_TOLERANCE).unwrap();
    assert_eq!(report.perturbation.rho, 0.0);
    let mu = report.pl.mu().expect("separable blobs are PL along the trajectory");
    let oracle = run
        .losses
        .iter()
        .zip(&run.full_grads)
        .map(|(l, g)| 0.5 * g.iter().map(|x| x * x).sum::<f64>() / l)
        .fold(f64::INFINITY, f64::min);
    assert!(mu > 0.0);
    assert!((mu - oracle).abs() <= 1e-12 * oracle);
    assert!(report.check.unwrap().all_hold_from(0));
}

#[test]
fn dropping_one_example_shifts_the_mean_gradient_by_its_deviation() {
    let data = blobs(3);
    let model = ToyModel::init(Architecture::OneHidden { width: 5 }, 2, 2, 3).unwrap();
    let all = data.all_indices();
    let n = all.len() as f64;
    let (_, mean) = loss_and_grad(&model, &data, &all).unwrap();
    for i in [0, 17, 79] {
        let rest: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
        let (_, without) = loss_and_grad(&model, &data, &rest).unwrap();
        let (_, gi) = model.example_grad(data.x(i), data.label(i));
        for ((w, m), g) in without.iter().zip(&mean).zip(&gi) {
            assert!((w - (m + (m - g) / (n - 1.0))).abs() < 1e-12);
        }
    }
}

#[test]
fn random_policy_follows_its_schedule() {
    let data = blobs(4);
    let model = ToyModel::init(Architecture::Linear, 2, 2, 4).unwrap();
    let schedule = vec![(3, 0, 2), (3, 1, 1), (6, 1, 4)];
    let policy = DropPolicy::Random { schedule: schedule.clone(), seed: 9 };
    let run = instrumented_run(&data, &model, 0.1, 10, &policy).unwrap();
    assert_eq!(run.drop_schedule(), schedule);
    assert_eq!(run.first_drop_epoch, Some(3));
    assert!(run.drops.iter().all(|d| data.label(d.index) == d.class));
    let again = instrumented_run(&data, &model, 0.1, 10, &policy).unwrap();
    assert_eq!(run, again);
    assert_eq!(&run.full_grads[..3], &run.subset_grads[..3]);
    assert_ne!(run.full_grads[3], run.subset_grads[3]);
}

#[test]
fn defended_run_starts_dropping_after_warmup_and_satisfies_the_bound() {
    let data = blobs(5);
    let model = ToyModel::init(Architecture::Linear, 2, 2, 5).unwrap();
    let cfg = DefenseConfig { seed: 5, ..DefenseConfig::preset(0.1) };
    let run = instrumented_run(&data, &model, 0.1, 40, &DropPolicy::Epic(cfg.clone())).unwrap();
    let first = run.first_drop_epoch.expect("isolated medoids appear on blobs");
    assert!(first >= cfg.warmup_epochs && cfg.is_round_epoch(first));
    assert!(run.drops.iter().all(|d| cfg.is_round_epoch(d.epoch)));
    let report = theorem_report(&run, BOUND_TOLERANCE).unwrap();
    assert!(report.perturbation.rho > 0.0);
    assert!(report.check.unwrap().all_hold_from(cfg.warmup_epochs));
}
