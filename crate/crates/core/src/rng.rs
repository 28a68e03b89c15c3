//! Deterministic substream seeding.
//!
//! Every parallel work item (cross-validation split, bootstrap replicate,
//! simulated run, scanned bandwidth) draws its generator from
//! `substream(master, index)`. Results are then independent of evaluation
//! order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive the seed of substream `index` from a master seed (SplitMix64 mix).
pub fn substream_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for substream `index` of `master`.
pub fn substream(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, index))
}
