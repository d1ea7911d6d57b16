//! Seeded randomness. Every stochastic routine takes an explicit generator;
//! independent streams are derived from `(seed, stream, index)` so batches
//! can be generated in any order, or in parallel, with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers for the different consumers of a run seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN_TASKS: u64 = 2;
    pub const EVAL_TASKS: u64 = 3;
    pub const ORACLE: u64 = 4;
    pub const BENCH: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, index))
}
