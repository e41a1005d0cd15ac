//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream. Independent
//! substreams are derived by hashing the run seed with a label path such as
//! `(vehicle id, slot)`, so results never depend on the order in which
//! components consume randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

pub fn from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from `seed` and a label path.
pub fn substream(seed: u64, domain: &str, parts: &[u64]) -> SimRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// A derived 64-bit seed, for APIs that take a seed rather than a stream.
pub fn derive_seed(seed: u64, domain: &str, parts: &[u64]) -> u64 {
    use rand::RngCore;
    substream(seed, domain, parts).next_u64()
}
