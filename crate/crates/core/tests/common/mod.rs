#![allow(dead_code)]

use epic_core::rng::{seeded, EpicRng};
use rand::Rng;

pub fn rng(seed: u64) -> EpicRng {
    seeded(seed)
}

pub fn normal_vec(rng: &mut EpicRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller keeps the oracle independent of the library's sampler.
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Cross-entropy through a max-shifted log-sum-exp.
pub fn ce(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Central finite differences of `f` at `x`.
pub fn fd_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Facility-location value computed straight from coordinates.
pub fn facility_value(points: &[Vec<f64>], set: &[usize]) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let mut c0 = 0.0f64;
    for a in points {
        for b in points {
            c0 = c0.max(euclid(a, b));
        }
    }
    points.iter().map(|p| set.iter().map(|&j| c0 - euclid(p, &points[j])).fold(f64::NEG_INFINITY, f64::max)).sum()
}

/// Best value over all subsets of size at most `k`, by bitmask enumeration.
pub fn brute_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > k {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        best = best.max(facility_value(points, &set));
    }
    best
}

pub fn random_points(rng: &mut EpicRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| normal_vec(rng, d, 1.0)).collect()
}
