//! Splittable deterministic randomness.
//!
//! Every consumer of randomness gets its own named stream derived from a
//! parent key by hashing, so adding draws to one stream can never shift the
//! values another stream sees. Derivation is pure: a stream's key is
//! immutable and `substream` consumes nothing from the parent.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// A named stream of pseudo-random draws with a 32-byte identity key.
pub struct RngStream {
    key: [u8; 32],
    rng: ChaCha12Rng,
}

impl RngStream {
    /// Root stream for a study seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self::from_key(key)
    }

    fn from_key(key: [u8; 32]) -> Self {
        RngStream {
            key,
            rng: ChaCha12Rng::from_seed(key),
        }
    }

    /// Derive an independent child stream. The child key is
    /// SHA-256(parent_key || 0x01 || name), so distinct names give unrelated
    /// streams and the parent's own draw position is untouched.
    pub fn substream(&self, name: &str) -> RngStream {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update([0x01u8]);
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Self::from_key(key)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform draw from [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        mean + sd * z
    }

    /// Bernoulli draw: true with probability p.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}
