//! Derivation of independent RNG streams from the single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Training episode stream.
pub const STREAM_TRAIN: u64 = 1;
/// Validation episode stream.
pub const STREAM_VAL: u64 = 2;
/// Evaluation episode stream.
pub const STREAM_EVAL: u64 = 3;
/// Parameter initialisation.
pub const STREAM_INIT: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of `stream` under run seed `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ stream.rotate_left(32)) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
