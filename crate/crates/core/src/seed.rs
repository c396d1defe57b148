//! Seed derivation. Every random stream in the crate is keyed by a master
//! seed plus a path of integer tags, so parallel work is reproducible no
//! matter which worker picks up which item.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of `(master, tags...)`.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for (i, &t) in tags.iter().enumerate() {
        h = splitmix64(h ^ splitmix64(t.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN))));
    }
    h
}

/// Seed for site `site` of training sample `sample`.
pub fn site_seed(master: u64, sample: u64, site: u64) -> u64 {
    derive(master, &[sample, site])
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(master: u64, tags: &[u64]) -> Rng {
    rng(derive(master, tags))
}

/// Tags used to separate independent streams derived from one master seed.
pub mod stream {
    pub const PRIOR: u64 = 1;
    pub const SIMULATE: u64 = 2;
    pub const SCHEDULE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const INIT: u64 = 7;
    pub const BASE: u64 = 8;
    pub const VALIDATION: u64 = 9;
    pub const SURROGATE: u64 = 10;
    pub const DROPOUT: u64 = 11;
    pub const STAGE1: u64 = 12;
    pub const STAGE2: u64 = 13;
    pub const STICK: u64 = 14;
    pub const GLOBAL_DRAW: u64 = 15;
    pub const CLASSIFIER: u64 = 16;
    pub const PERMUTE: u64 = 17;
    pub const REFERENCE: u64 = 18;
    pub const OBSERVATION: u64 = 19;
}
