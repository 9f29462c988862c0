//! Counter-based seed derivation.
//!
//! Every random stream in the pipeline is keyed by `(master, stage, item, ..)`
//! so that results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage identifiers used when fanning out the master seed.
pub mod stage {
    pub const DEMO: u64 = 1;
    pub const RETARGET: u64 = 2;
    pub const SOURCE_REFINE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const TRANSFER_REFINE: u64 = 5;
    pub const FEATURES: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const BASELINE: u64 = 9;
    pub const RANDOM_SEED_ABLATION: u64 = 10;
    pub const FIELD: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a path of counters into a single 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
