//! Seeded randomness.
//!
//! Every stochastic routine takes a `u64` seed and builds a ChaCha8 stream
//! from it. Child seeds are derived with [`split`], a SplitMix64 finalizer
//! over `seed ^ golden * (tag + 1)`, so a run-level seed fans out into
//! independent per-instance or per-stage streams without shared state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of child stream `tag` from `seed`.
pub fn split(seed: u64, tag: u64) -> u64 {
    mix(seed ^ GOLDEN.wrapping_mul(tag.wrapping_add(1)))
}

/// Uniform draw in `[0, 1)` built from the top 53 bits of one `u64`.
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform index in `0..n`.
pub fn index(rng: &mut impl Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    rng.random_range(0..n)
}

/// Samples an index from unnormalized non-negative weights.
pub fn weighted(rng: &mut impl RngCore, weights: &[f64], total: f64) -> usize {
    let target = unit(rng) * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}
