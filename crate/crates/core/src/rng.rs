//! Seed derivation for independent RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer: decorrelates `(master, stream)` pairs.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

/// Named stream indices so that distinct uses of one seed never collide.
pub mod streams {
    pub const CLASSIFIER_INIT: u64 = 1;
    pub const GENERATOR_INIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const VICTIM_INIT: u64 = 4;
    pub const VICTIM_BATCHES: u64 = 5;
    pub const SUBSET: u64 = 6;
    pub const CLEAN_BATCHES: u64 = 7;
}
