//! Seed splitting. Every random stream in a run is derived from one global
//! seed and a stream tag with SplitMix64, so each stream is reproducible on
//! its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Stream tags. Indexed streams (one per noisy dataset, one per sample batch)
/// mix an index in through [`derive_seed`] twice.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const VAE_NOISE: u64 = 4;
    pub const EVAL_SAMPLING: u64 = 5;
    pub const NOISY_DATASET: u64 = 6;
    pub const BOUND_TRIALS: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(seed: u64, tag: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}
