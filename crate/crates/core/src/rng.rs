//! Reproducible pseudo-random numbers.
//!
//! All randomness in the crate flows from a single `u64` seed through
//! xoshiro256++, whose 256-bit state is expanded from the seed with
//! SplitMix64 (`SeedableRng::seed_from_u64`). Child streams are derived by
//! mixing a stream tag into the parent seed, again with SplitMix64, so that
//! adding a consumer never perturbs the others.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type EpicRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> EpicRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent sub-stream identified by `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

pub fn uniform(rng: &mut EpicRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Fisher-Yates shuffle driven by the crate generator.
pub fn shuffle<X>(rng: &mut EpicRng, items: &mut [X]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// `count` distinct positions drawn uniformly from `0..n`, in draw order.
pub fn sample_without_replacement(rng: &mut EpicRng, n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}
