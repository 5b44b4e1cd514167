//! Seed derivation. Every random stream in the pipeline is a ChaCha8 generator
//! whose seed is mixed from the run seed and a fixed tag path, so results do
//! not depend on thread scheduling or call order across streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags. Distinct constants keep unrelated streams decorrelated.
pub mod tag {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const INIT: u64 = 0x494e_4954;
    pub const EPOCH: u64 = 0x4550_4f43;
    pub const SAMPLE_CLIENTS: u64 = 0x5341_4d50;
    pub const PERMUTATION: u64 = 0x5045_524d;
    pub const GAUSS_DUMMY: u64 = 0x4741_5553;
    pub const SYNTH: u64 = 0x5359_4e54;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc.rotate_left(23) ^ splitmix64(t)))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}
