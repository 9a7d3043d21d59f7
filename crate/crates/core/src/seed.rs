//! Stable seed derivation.
//!
//! Every random draw in the harness (few-shot sampling, list capping,
//! bootstrap resampling) is driven by a seed derived from a base seed and the
//! identity of the thing being randomized, so results do not depend on
//! iteration order or thread scheduling.

use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a base seed and a sequence of labels.
pub fn derive(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Hex SHA-256 of `parts`, each length-prefixed.
pub fn content_hash(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}
