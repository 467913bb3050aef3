//! Seed derivation and deterministic sampling helpers.
//!
//! Every random decision in the crate flows from a user-supplied 64-bit seed
//! through [`derive_seed`], so independent streams (weight init, per-step
//! noise, shuffles, sprite jitter, ...) never alias each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags keeping independent consumers of the same base seed apart.
pub mod stream {
    pub const INIT: u64 = 0x01;
    pub const STEP_NOISE: u64 = 0x02;
    pub const SHUFFLE: u64 = 0x03;
    pub const TARGET_DOMAIN: u64 = 0x04;
    pub const SPRITE_JITTER: u64 = 0x05;
    pub const DOMAIN_TEXTURE: u64 = 0x06;
    pub const ATTRS: u64 = 0x07;
    pub const SAMPLE_Z: u64 = 0x08;
    pub const PROBE_SPLIT: u64 = 0x09;
}

/// splitmix64-style finalizer over (seed, tag, index).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index.wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha stream for `(seed, tag, index)`.
pub fn rng_for(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

/// One standard-normal draw.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n` standard-normal draws.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + u * (hi - lo)
}
