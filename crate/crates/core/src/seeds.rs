//! Seed derivation: one global seed fans out into independent, reproducible
//! streams keyed by purpose strings and integer coordinates.

use sha2::{Digest, Sha256};

/// Derive a child seed from `root` and a purpose label plus coordinates.
pub fn derive(root: u64, purpose: &str, coords: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(purpose.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}
