//! Named, seeded random sub-streams.
//!
//! Every consumer of randomness (init, shuffling, MLM corruption, negative
//! sampling, data generation) draws from its own stream keyed by
//! `(seed, name, index)`, so enabling one source never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng
    }
}

// 64-bit FNV-1a; stable across builds unlike std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
