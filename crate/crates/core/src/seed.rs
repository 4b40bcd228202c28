//! Seed derivation. Every stochastic choice in the pipeline draws from a
//! ChaCha stream keyed by a mix of the run seed and the role of the draw, so
//! results never depend on iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a sequence of words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

// Role tags keep streams for different purposes disjoint.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_EPOCH: u64 = 2;
pub(crate) const TAG_AUGMENT: u64 = 3;
pub(crate) const TAG_RENDER: u64 = 4;
pub(crate) const TAG_SPLIT: u64 = 5;
