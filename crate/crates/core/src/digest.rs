//! Content hashing and seed derivation shared by every stage.

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Derives a per-item seed from a global seed and a stable key (usually a
/// video id). Parallel workers that use this never observe each other's
/// RNG state, so results do not depend on scheduling.
pub fn split_seed(global_seed: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let out = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&out[..8]);
    u64::from_le_bytes(word)
}

/// Short content id: the first 16 hex chars of SHA-256 over the parts,
/// separated by the ASCII unit separator.
pub fn content_id(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(part.as_bytes());
    }
    let mut id = hex::encode(hasher.finalize());
    id.truncate(16);
    id
}
