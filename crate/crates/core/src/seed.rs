//! Seed derivation. Every random stream in the crate is keyed off a master
//! seed plus a stream label, so changing the master seed changes all of them
//! and no two streams share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `seed`, a stream label and an index.
pub fn derive(seed: u64, stream: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}

/// Torch seeds must fit in an i64.
pub fn torch_seed(seed: u64) -> i64 {
    (seed >> 1) as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent() {
        assert_ne!(derive(1, "a", 0), derive(1, "b", 0));
        assert_ne!(derive(1, "a", 0), derive(1, "a", 1));
        assert_ne!(derive(1, "a", 0), derive(2, "a", 0));
        assert_eq!(derive(7, "gan", 3), derive(7, "gan", 3));
        // Label boundaries are length-prefixed.
        assert_ne!(derive(0, "ab", 0), derive(0, "a", 0));
    }
}
