//! Portable pseudo-random streams.
//!
//! Everything that must be reproducible across platforms (splits, concept
//! embeddings, parameter init, epoch order) draws from SplitMix64.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

/// A SplitMix64 stream with the derived draws used across the crate.
#[derive(Debug, Clone)]
pub struct Stream(SplitMix64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform index in `0..bound` via the 128-bit multiply-high map.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit(); // (0, 1]
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle, last index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// 64-bit FNV-1a over the UTF-8 bytes of `text`.
pub fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in text.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Mixes a base seed with a stream index so that sibling streams
/// (epochs, parameters) do not overlap.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut s = Stream::new(base ^ index.wrapping_mul(0xd1342543de82ef95));
    s.next_u64()
}
