//! Seed derivation and the versioned generator used for every random draw.
//!
//! All stochastic stages draw from [`StageRng`] (ChaCha8, whose output
//! stream is stable across platforms). Stage seeds are derived from a master
//! seed and a textual label, so re-running a single stage of a single task
//! reproduces exactly the draws of the full run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator used for every random draw in the pipeline.
pub type StageRng = ChaCha8Rng;

/// Identifier of the seed-derivation scheme, recorded in manifests.
pub const SEED_SCHEME: &str = "sha256-label-v1/chacha8";

pub fn rng_from_seed(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed: the first eight bytes (little endian) of
/// `SHA-256(le_bytes(parent) || label)`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "episode"), derive_seed(7, "episode"));
        assert_ne!(derive_seed(7, "episode"), derive_seed(7, "generation"));
        assert_ne!(derive_seed(7, "episode"), derive_seed(8, "episode"));
    }

    #[test]
    fn rng_stream_is_reproducible() {
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = rng_from_seed(3);
                move |_| r.next_u64()
            })
            .collect();
        let mut r = rng_from_seed(3);
        let b: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(a, b);
    }
}
