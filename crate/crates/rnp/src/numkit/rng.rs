//! Counter-based random streams keyed by (seed, purpose, indices).
//!
//! Identical keys yield identical draw sequences regardless of thread
//! schedule or call interleaving, which is what makes task generation and
//! training reproducible under any evaluation order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root of all randomness in a run.
#[derive(Debug, Clone, Copy)]
pub struct RngStream {
    seed: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent generator for (purpose, index).
    pub fn stream(&self, purpose: &str, index: u64) -> ChaCha8Rng {
        self.stream2(purpose, index, 0)
    }

    /// Derive an independent generator for (purpose, index, sub-index),
    /// e.g. (task index, sample index).
    pub fn stream2(&self, purpose: &str, index: u64, sub: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self
            .seed
            .wrapping_add(splitmix64(fnv1a(purpose)))
            .wrapping_add(splitmix64(index.wrapping_mul(0x9E3779B97F4A7C15)))
            .wrapping_add(splitmix64(sub ^ 0xA5A5A5A5A5A5A5A5));
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// Standard-normal draws into a flat buffer.
pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let dist = rand_distr::StandardNormal;
    (0..n).map(|_| rng.sample::<f64, _>(dist)).collect()
}
