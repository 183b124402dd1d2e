//! Counter-based random streams.
//!
//! A stream is identified by a 64-bit key. Child keys are derived by mixing
//! the parent key with a counter, so any node of a rollout tree can be
//! re-simulated without replaying its siblings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Vec2;

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key of child `index` under `parent`.
#[inline]
pub fn child_key(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Key derived from a seed and a path of counters.
pub fn key_from_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |k, &p| child_key(k, p))
}

/// A ChaCha stream for `key`.
pub fn stream(key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key)
}

/// Standard normal 2D vector from `rng`.
pub fn normal2<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec2 {
    [StandardNormal.sample(rng), StandardNormal.sample(rng)]
}

/// The standard normal pair attached to `key`.
pub fn normal2_at(key: u64) -> Vec2 {
    normal2(&mut stream(key))
}
