//! Seeded randomness. Every stage draws from its own named substream of the
//! global seed so that changing one stage's configuration leaves the others'
//! draws untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Derives the seed of the substream `name` from `seed`.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn substream(seed: u64, name: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name))
}
