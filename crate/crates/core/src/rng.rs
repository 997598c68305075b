//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, domain, index)`, so rows, epochs and trials can be generated in
//! any order (or in parallel) and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains. Distinct constants keep e.g. the shuffle for epoch 3 from
/// sharing a stream with candidate row 3.
pub mod domain {
    pub const USS: u64 = 0x5553_5300;
    pub const FPS: u64 = 0x4650_5300;
    pub const AUX: u64 = 0x4155_5800;
    pub const LONGTAIL: u64 = 0x4c54_0000;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const INIT: u64 = 0x494e_4954;
    pub const CRD_NOISE: u64 = 0x4352_4400;
    pub const SYNTH: u64 = 0x5359_4e00;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a domain tag and an index into a 64-bit stream key.
pub fn derive_key(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(domain)) ^ index)
}

pub fn stream(seed: u64, domain: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, domain, index))
}
