//! Seeded random streams. Every consumer of randomness gets its own stream so
//! that turning one component off never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const ENV: u64 = 2;
    pub const DEMO_PICK: u64 = 3;
    pub const ACTION_NOISE: u64 = 4;
    pub const MINIBATCH: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const TASK: u64 = 7;
    pub const GWR_INIT: u64 = 8;
    pub const SHUFFLE: u64 = 9;
    pub const LATENT_NOISE: u64 = 10;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a seed with an index (episode, epoch, demo) into a fresh seed.
pub fn derive(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
