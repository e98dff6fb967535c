//! Seeded stream derivation.
//!
//! All randomness in the simulator flows through here. Streams are derived
//! from a master seed plus a list of tags (purpose, task id, step index, ...)
//! so that a given draw does not depend on event ordering or on which
//! experiment mode is running. That property is what makes cross-mode and
//! cross-parameter comparisons use common random numbers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream purposes. Values are arbitrary but stable.
pub mod tag {
    pub const TASK_SHAPE: u64 = 0x01;
    pub const ARRIVALS: u64 = 0x02;
    pub const SAMPLE_KEYS: u64 = 0x03;
    pub const SCORES: u64 = 0x04;
    pub const REPLICATION: u64 = 0x05;
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold a tag into a running seed.
pub fn mix(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ tag.wrapping_mul(0xa24baed4963ee407))
}

/// Derive a deterministic RNG from a master seed and a tag path.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut s = mix64(master);
    for &t in tags {
        s = mix(s, t);
    }
    ChaCha12Rng::seed_from_u64(s)
}
