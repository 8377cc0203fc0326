//! Hierarchical seed derivation.
//!
//! One master seed fans out to every source of randomness in a run (fold
//! split, synthesis, weight init, batch order, bag subsampling, bootstrap
//! replicates). Each consumer derives its own 64-bit seed from the master
//! seed and a label path, so adding a new consumer never perturbs the
//! streams of existing ones.
//!
//! Derivation: SHA-256 over the little-endian master seed followed by the
//! `/`-joined label path; the first 8 digest bytes, little-endian, are the
//! child seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from `master` and a label path.
pub fn derive(master: u64, path: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for (i, part) in path.iter().enumerate() {
        if i > 0 {
            hasher.update(b"/");
        }
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic RNG seeded from a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `rng(derive(master, path))`.
pub fn rng_for(master: u64, path: &[&str]) -> ChaCha8Rng {
    rng(derive(master, path))
}
