//! Independent RNG streams derived from a master seed.
//!
//! Every random choice in a run draws from a stream keyed by the master seed
//! and a path such as `(TRAIN, client, round, epoch)`, so results do not
//! depend on which thread runs which client or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MODEL_INIT: u64 = 1;
pub const DATA_TRAIN: u64 = 2;
pub const DATA_TEST: u64 = 3;
pub const PARTITION: u64 = 4;
pub const TRAIN: u64 = 5;
pub const FISHER: u64 = 6;
pub const EVAL: u64 = 7;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `path` into `master` one component at a time.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, path))
}
