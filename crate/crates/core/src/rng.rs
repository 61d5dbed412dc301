//! Seeded random streams. Every stochastic component draws from its own
//! ChaCha stream so that, for example, enabling the contrastive branch does
//! not perturb the supervised batch order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod tag {
    pub const BACKBONE_INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const PREDICTOR_INIT: u64 = 3;
    pub const SUPERVISED_ORDER: u64 = 10;
    pub const PAIRS: u64 = 11;
    pub const DROPOUT: u64 = 12;
    pub const UNLABELED_SUBSAMPLE: u64 = 13;
    pub const CONTENT: u64 = 20;
    pub const APPEARANCE: u64 = 21;
    pub const SPLIT: u64 = 22;
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// A stream keyed additionally by a string (domain ids, volume ids).
pub fn keyed_stream(seed: u64, tag: u64, key: &str) -> Rng {
    // FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17));
    rng.set_stream(tag);
    rng
}
