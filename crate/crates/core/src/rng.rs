//! Deterministic RNG streams.
//!
//! Every consumer of randomness gets its own stream derived from `(seed,
//! salt)`, so adding or removing one consumer never shifts the draws seen by
//! another. This is what makes a fully-masked conditional run reproduce the
//! plain run bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod salt {
    pub const BACKBONE_INIT: u64 = 1;
    pub const AUX_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TRAIN_MASK: u64 = 4;
    pub const DATAGEN: u64 = 5;
    pub const EVAL_MASK: u64 = 6;
    pub const SUPP_INIT: u64 = 7;
}

pub fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&salt.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
