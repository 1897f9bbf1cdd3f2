//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator. Streams are
//! ChaCha8 keyed by the user seed, with the ChaCha stream id selected by
//! hashing a path of integers (protocol tag, repeat index, prompt id, ...).
//! Two different paths give independent streams, so work can be split
//! across threads without changing any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Default seed used by commands when none is given.
pub const DEFAULT_SEED: u64 = 20_240_917;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the generator for `seed` at the given stream path.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut id = 0x5EED_0000_0000_0001_u64;
    for &p in path {
        id = splitmix64(id ^ splitmix64(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream tags, so the same seed drives unrelated consumers independently.
pub mod tag {
    pub const POPULATION: u64 = 1;
    pub const TABLE: u64 = 2;
    pub const GROUP_SWEEP: u64 = 3;
    pub const HETEROGENEITY: u64 = 4;
    pub const DIFFICULTY: u64 = 5;
    pub const BETA_CURVE: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const CALIBRATE: u64 = 9;
    pub const ORACLE: u64 = 10;
    pub const BOOTSTRAP: u64 = 11;
}
