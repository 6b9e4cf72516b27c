//! Seeded randomness shared by every sampler and strategy.
//!
//! All randomness flows through [`ChaCha8Rng`], seeded with
//! `SeedableRng::seed_from_u64`. Both the generator and the seed expansion
//! are portable, so a seed reproduces the same designs on every platform.
//! Child streams are derived with the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TuneRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> TuneRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of an independent child stream identified by `stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
