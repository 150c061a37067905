//! Deterministic, splittable random streams.
//!
//! Every consumer derives its own ChaCha8 stream from a root seed and a
//! purpose label, so adding or reordering draws in one place never shifts the
//! sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream for `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derives a child seed, e.g. per generated phantom.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, label, index).next_u64()
}
