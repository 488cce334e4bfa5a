//! Keyed deterministic random streams derived from one root seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Random stream for one subsystem. The generator seed is
/// `SHA-256(seed_le || key)`, so streams do not depend on creation order.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    key: String,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, key: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(key.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        Self { seed, key: key.to_owned(), rng: ChaCha8Rng::from_seed(digest) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli trial with probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Uniform integer in `[0, max]`.
    pub fn uniform_inclusive(&mut self, max: u64) -> u64 {
        if max == 0 {
            return 0;
        }
        if max == u64::MAX {
            return self.rng.next_u64();
        }
        let span = max + 1;
        // rejection sampling keeps the draw unbiased
        let zone = u64::MAX - (u64::MAX % span) - 1;
        loop {
            let v = self.rng.next_u64();
            if v <= zone {
                return v % span;
            }
        }
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
