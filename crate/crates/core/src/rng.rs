//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream whose seed is
//! derived from the master seed and a path of indices (fold, round, trial,
//! purpose...). Streams never share state, so the order in which workers
//! run does not change what each of them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purpose tags mixed into derived seeds so that, e.g., the weight init
/// and the minibatch shuffle of the same fold never coincide.
pub mod tag {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const FOLD_TRAIN: u64 = 0x464f_4c44;
    pub const SUBSAMPLE: u64 = 0x5355_4253;
    pub const SUGGEST: u64 = 0x5355_4747;
    pub const EVALUATE: u64 = 0x4556_414c;
    pub const RETRAIN: u64 = 0x5245_5452;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const AUGMENT: u64 = 0x4155_474d;
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const RANDOM_POLICY: u64 = 0x524e_4450;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and an index path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

/// Opens the stream for `seed` at `path`.
pub fn stream(seed: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
