//! Seeded randomness as named sub-streams of a single root seed.
//!
//! Every random draw in the crate comes from `stream_rng(root, path)` where
//! `path` names the consumer (e.g. `"maskplan/slide042/iter7"`). Streams are
//! stable under unrelated config changes and need no mutable RNG state to be
//! checkpointed: resuming at iteration k re-derives the same streams.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for the sub-stream `path` of `root`.
pub fn stream_rng(root: u64, path: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(b"/");
    h.update(path.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// A 64-bit sub-seed, for APIs that take a seed rather than an RNG.
pub fn stream_seed(root: u64, path: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(b"/");
    h.update(path.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
