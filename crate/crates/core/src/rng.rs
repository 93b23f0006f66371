//! Deterministic random source with named sub-streams.
//!
//! Each handle is a ChaCha8 generator keyed by `SHA-256(seed_le || stream)`,
//! so `(seed, stream, call sequence)` yields the same draws on every
//! platform and two streams never share state. Float draws take the top 53
//! bits of a `u64` and scale by `2^-53`, giving values in `[0, 1)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RngHandle {
    seed: u64,
    stream: String,
    rng: ChaCha8Rng,
    draws: u64,
}

impl RngHandle {
    pub fn new(seed: u64, stream: impl Into<String>) -> Self {
        let stream = stream.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(stream.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        RngHandle {
            seed,
            stream,
            rng: ChaCha8Rng::from_seed(key),
            draws: 0,
        }
    }

    /// A fresh handle on `"{stream}/{tag}"` under the same seed. The parent's
    /// draw position does not affect the child.
    pub fn substream(&self, tag: &str) -> RngHandle {
        RngHandle::new(self.seed, format!("{}/{}", self.stream, tag))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &str {
        &self.stream
    }

    /// Number of primitive draws taken so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.rng.next_u64()
    }

    /// Uniform float in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn uniform_index(&mut self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::EmptyRange);
        }
        if n == 1 {
            return Ok(0);
        }
        self.draws += 1;
        // sampled as u64 so the result does not depend on pointer width
        Ok(self.rng.random_range(0..n as u64) as usize)
    }

    /// Standard normal draw (Box-Muller, one of the pair).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_index(i + 1).expect("non-empty range");
            items.swap(i, j);
        }
    }
}
