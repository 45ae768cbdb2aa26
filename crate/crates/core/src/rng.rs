//! Counter-based random streams.
//!
//! Draw `i` of a stream is a pure function of `(seed, i)`, so streams can be
//! checkpointed as two integers and reproduce on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent child stream keyed by `key`; does not advance `self`.
    pub fn derive(&self, key: u64) -> Self {
        Self::new(mix64(mix64(self.seed ^ GOLDEN) ^ key.wrapping_mul(GOLDEN)))
    }

    /// Child stream keyed by a sequence of integers (e.g. epoch, step, index).
    pub fn derive_path(&self, keys: &[u64]) -> Self {
        keys.iter().fold(*self, |s, &k| s.derive(k))
    }

    #[inline]
    pub fn draw(&mut self) -> u64 {
        let v = mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)) ^ GOLDEN);
        self.counter = self.counter.wrapping_add(1);
        mix64(v)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(self);
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.draw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.draw()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.draw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
