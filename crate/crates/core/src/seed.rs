//! Deterministic sub-seed derivation so every random stream is keyed by
//! explicit coordinates (run seed, epoch, batch, instance index, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed` with a path of stream coordinates.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Stream tags keep unrelated consumers of one run seed apart.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const GUMBEL: u64 = 3;
    pub const PERM: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SUBSET: u64 = 6;
    pub const WORLD: u64 = 7;
    pub const DATASET: u64 = 8;
    pub const DOWNSAMPLE: u64 = 9;
}
