//! Deterministic seed derivation.
//!
//! Every stochastic component draws from a `ChaCha8Rng` seeded by mixing the
//! master seed with a stable label path. Results are identical across
//! platforms and worker counts because each unit of work (sample, rollout)
//! derives its own stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over bytes; stable across runs and platforms (unlike `DefaultHasher`).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mix a master seed with a label and numeric lanes into a child seed.
pub fn derive_seed(master: u64, label: &str, lanes: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ fnv1a64(label.as_bytes()));
    for &lane in lanes {
        h = splitmix64(h ^ lane);
    }
    h
}

/// ChaCha stream for a derived seed.
pub fn derive_rng(master: u64, label: &str, lanes: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, lanes))
}
