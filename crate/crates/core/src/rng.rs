//! Deterministic seed handling.
//!
//! Every random decision in the crate flows from a `u64` seed through
//! ChaCha8, so a (seed, config) pair pins the whole run bit-for-bit.

use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed, a purpose tag, and an
/// index (FNV-1a over the parts). Used so e.g. per-sample dropout masks do not
/// depend on thread scheduling.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut absorb = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for b in base.to_le_bytes() {
        absorb(b);
    }
    for b in tag.as_bytes() {
        absorb(*b);
    }
    for b in index.to_le_bytes() {
        absorb(b);
    }
    h
}
