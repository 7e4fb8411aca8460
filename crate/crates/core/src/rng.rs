//! Deterministic seed derivation.
//!
//! Every random stream in the workspace is a `ChaCha8Rng` keyed by a seed
//! hashed from a master seed and a list of integer tags, so that per-episode
//! streams are independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a master seed and tags into a child seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn rng_from(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Stream tags, kept distinct so training, evaluation and policy sampling
/// never share a generator.
pub mod stream {
    pub const TRAIN_ENV: u64 = 1;
    pub const EVAL_ENV: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const INIT: u64 = 4;
    pub const BASELINE: u64 = 5;
}
