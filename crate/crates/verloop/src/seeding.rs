//! Stateless seed derivation.
//!
//! Every random decision in the loop draws from a seed derived as
//! `hash(root_seed, labels...)`. No RNG state is threaded between stages, so
//! resuming from a checkpoint replays exactly the same stream as an
//! uninterrupted run.

use sha2::{Digest, Sha256};

/// Derive a child seed from the root seed and a label path, e.g.
/// `derive_seed(seed, &["iter3", "grpo", "prompt-0042"])`. Labels are
/// injected with separator bytes so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for part in parts {
        hasher.update([0u8]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
