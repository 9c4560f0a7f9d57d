//! Deterministic randomness.
//!
//! Every random draw in the toolkit flows from one run seed through
//! [`derive_seed`], which hashes a purpose tag plus integer context into a
//! child seed. The generator is ChaCha8: identical seed, identical stream,
//! on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed = first 8 bytes of SHA-256(root ‖ tag ‖ context words).
pub fn derive_seed(root: u64, tag: &str, context: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    for c in context {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn derived_rng(root: u64, tag: &str, context: &[u64]) -> Rng {
    rng_from_seed(derive_seed(root, tag, context))
}
