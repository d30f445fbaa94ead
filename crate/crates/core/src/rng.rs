//! Seeded randomness.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`]: a fixed, portable
//! algorithm whose output for a given 32-byte seed is identical on every
//! platform. A single master `u64` seed is expanded into independent
//! per-purpose streams by [`derive_seed`], which mixes the master seed with a
//! stream label through SplitMix64. Normal variates come from
//! `rand_distr::StandardNormal` (ziggurat) drawn from that stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels used by the experiment drivers.
pub mod streams {
    pub const SYNTHETIC: &str = "synthetic";
    pub const ANCHORS: &str = "anchors";
    pub const TRAINING: &str = "training";
    pub const TUNING: &str = "tuning";
    pub const FIXED_ITEM: &str = "fixed_item";
    pub const ITEM_CUR: &str = "item_cur";
    pub const PROXY: &str = "proxy";
    pub const SPLIT: &str = "split";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of a named sub-stream from a master seed.
///
/// The label is folded with 64-bit FNV-1a and combined with the master seed
/// through two SplitMix64 rounds.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(master) ^ h)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, label: &str) -> Rng {
    rng_from_seed(derive_seed(master, label))
}
