//! Seed derivation. Every random stream is a ChaCha8 generator keyed by a
//! master seed mixed with the stream's coordinates, so parallel jobs never
//! share state and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix `master` with a path of stream coordinates.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng_from(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}

/// Stream labels used across the crate.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const TRAIN_CHANNEL: u64 = 4;
    pub const EVAL_CHANNEL: u64 = 5;
    pub const EVAL_SELECTION: u64 = 6;
}
