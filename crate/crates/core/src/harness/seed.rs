//! Seed splitting.
//!
//! Every random stream is a ChaCha8 generator seeded with
//! `split_seed(seed, stream, index)`: SplitMix64 applied to
//! `seed + GOLDEN * (stream << 32 | index) + GOLDEN`. Streams are the
//! constants below; `index` numbers rollouts, folds, or is 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub const DATA: u64 = 1;
pub const TRAIN: u64 = 2;
pub const EVAL: u64 = 3;
pub const INIT: u64 = 4;
pub const SUCCESS: u64 = 5;
pub const FOLDS: u64 = 6;
pub const REPLAY: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn split_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let key = (stream << 32) | (index & 0xFFFF_FFFF);
    splitmix64(
        seed.wrapping_add(GOLDEN.wrapping_mul(key))
            .wrapping_add(GOLDEN),
    )
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, stream, index))
}
