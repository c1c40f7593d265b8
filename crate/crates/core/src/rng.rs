//! Seeded randomness. Every stream in the crate is a SplitMix64 generator so
//! results are reproducible across runs and platforms.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Seed of episode `index` in a run seeded with `base`.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    base ^ index
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform(rng: &mut SplitMix64) -> f64 {
    rng.random::<f64>()
}

pub fn gaussian(rng: &mut SplitMix64) -> f64 {
    rng.sample(StandardNormal)
}
