//! Counter-based seed derivation.
//!
//! Every random stream in the simulator is a `ChaCha8Rng` whose seed is obtained by
//! folding a list of integer keys through the SplitMix64 finaliser. For a fixed
//! prefix the map from the last key to the output is a bijection on `u64`, so seeds
//! that differ only in a counter never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser. Bijective on `u64`.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `keys` into `base`. Stable across versions; changing it invalidates every
/// recorded seed.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(mix64(base), |acc, &k| mix64(acc.wrapping_add(GOLDEN).wrapping_add(k.wrapping_mul(GOLDEN) ^ acc.rotate_left(17))))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags keep independent uses of one seed apart.
pub mod tag {
    pub const DATA: u64 = 0xDA7A;
    pub const PARTITION: u64 = 0x5A27;
    pub const SHARD: u64 = 0x5BAD;
    pub const NOISE: u64 = 0x4015E;
    pub const SPLIT: u64 = 0x5B117;
    pub const RUN: u64 = 0x12D4;
}
