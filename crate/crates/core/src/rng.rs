//! Seed fan-out.
//!
//! One user seed is expanded into independent named substreams so that every
//! stage (simulation, split, augmentation, training, distortion) and every
//! work item inside a stage can be replayed in isolation, whatever the
//! scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

pub mod streams {
    pub const TISSUE: u64 = 0x7469_7373_7565;
    pub const SIMULATION: u64 = 0x7369_6d75_6c61;
    pub const WAVELENGTH: u64 = 0x7761_7665;
    pub const PHOTON: u64 = 0x7068_6f74_6f6e;
    pub const SPLIT: u64 = 0x7370_6c69_74;
    pub const AUGMENT: u64 = 0x6175_676d;
    pub const TRAINING: u64 = 0x7472_6169_6e;
    pub const INIT: u64 = 0x696e_6974;
    pub const DROPOUT: u64 = 0x6472_6f70;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const DISTORTION: u64 = 0x6469_7374;
    pub const NOISE: u64 = 0x6e6f_6973_65;
    pub const BENCH: u64 = 0x6265_6e63_68;
}

/// SplitMix64 finalizer applied to the combined words.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of substream `stream` from `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn derive_seed2(seed: u64, stream: u64, index: u64) -> u64 {
    derive_seed(derive_seed(seed, stream), index)
}

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream))
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// Uniformly random permutation of `0..n` determined by `seed`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    idx
}
