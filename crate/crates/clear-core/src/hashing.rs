//! Stable hashing used for seeds, token buckets, and artifact digests.
//!
//! Seed derivation and feature hashing must be reproducible across platforms
//! and languages, so both are built on 64-bit FNV-1a over UTF-8 bytes. The
//! exact byte layouts are documented in `docs/FORMAT.md`.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// FNV-1a over parts joined with the unit separator byte 0x1f.
pub fn stable_hash(parts: &[&str]) -> u64 {
    let mut buf = Vec::with_capacity(parts.iter().map(|p| p.len() + 1).sum());
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            buf.push(0x1f);
        }
        buf.extend_from_slice(part.as_bytes());
    }
    fnv1a64(&buf)
}

/// Per-episode seed: depends only on (base_seed, task_id, run_index), never
/// on scheduling order.
pub fn run_seed(base_seed: u64, task_id: &str, run_index: u32) -> u64 {
    stable_hash(&[&base_seed.to_string(), task_id, &run_index.to_string()])
}

/// Hex-encoded SHA-256, used for content digests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}
