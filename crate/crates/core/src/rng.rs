//! Named, seed-derived random streams.
//!
//! Every consumer of randomness draws from its own stream derived from the
//! master seed and a label, so toggling one noise source never shifts the
//! samples seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Derive an independent generator for `(master, label, index)`.
pub fn substream(master: u64, label: &str, index: u64) -> SimRng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derive a 64-bit seed for `(master, label, index)`.
pub fn subseed(master: u64, label: &str, index: u64) -> u64 {
    use rand::RngCore;
    substream(master, label, index).next_u64()
}
