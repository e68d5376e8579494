//! Root-seed derivation.
//!
//! All randomness in the pipeline flows from one root seed. Stage- and
//! item-level seeds are derived by mixing tagged words through splitmix64,
//! which keeps every consumer independent and the whole pipeline reproducible
//! from a single knob.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag_word(tag: &str) -> u64 {
    // FNV-1a, stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `root`, a purpose tag, and an index.
pub fn derive(root: u64, tag: &str, index: u64) -> u64 {
    let mut z = splitmix64(root ^ tag_word(tag));
    z = splitmix64(z ^ index);
    z
}

/// Deterministic RNG for a derived seed. ChaCha8 is stable across platforms
/// and rand versions, unlike `StdRng`.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
