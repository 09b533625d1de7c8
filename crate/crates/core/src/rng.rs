//! Deterministic random streams.
//!
//! Every stream is a ChaCha20 generator keyed by 32 bytes expanded from a
//! `(master, index)` pair with SplitMix64:
//!
//! ```text
//! h_0 = splitmix64(master ^ splitmix64(index))
//! h_k = splitmix64(h_{k-1})          key = h_1 || h_2 || h_3 || h_4 (little endian)
//! ```
//!
//! Uniform draws take the top 53 bits of a 64-bit output; normal draws use
//! Box-Muller. The whole scheme is versioned by [`GENERATOR`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Name and version of the stream scheme; bump it when draws can change.
pub const GENERATOR: &str = "chacha20-splitmix64-v1";

/// Stream index reserved for scenario construction.
pub const SCENARIO_STREAM: u64 = u64::MAX;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha20 key for stream `index` of `master`.
pub fn derive_key(master: u64, index: u64) -> [u8; 32] {
    let mut h = splitmix64(master ^ splitmix64(index));
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    key
}

/// A seeded stream of uniform and normal variates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainRng {
    inner: ChaCha20Rng,
}

impl ChainRng {
    pub fn new(master: u64, index: u64) -> Self {
        Self {
            inner: ChaCha20Rng::from_seed(derive_key(master, index)),
        }
    }

    /// The stream used to build scenarios from `seed`.
    pub fn for_scenario(seed: u64) -> Self {
        Self::new(seed, SCENARIO_STREAM)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal variate.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
