//! Seed derivation. Every stochastic component gets its own stream derived
//! from the global seed and a component label, so adding a component never
//! shifts another component's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix64(seed ^ mix64(label_hash(label)))
}

/// Combines a seed with an integer key (row index, epoch, batch, ...).
pub fn keyed(seed: u64, key: u64) -> u64 {
    mix64(seed.wrapping_add(mix64(key.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
