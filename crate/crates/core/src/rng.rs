//! Seed derivation.
//!
//! A run has one root seed. Each stage gets its own stream with
//! `derive_seed(root, label)`, where `label` names the stage (for example
//! `"alice.code"` or `"tdc.ch03"`). The derivation hashes the label with
//! FNV-1a and mixes it into the root with two SplitMix64 rounds, so adding a
//! stage never perturbs the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used by every stochastic routine in the crate.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(splitmix64(root) ^ fnv1a(label))
}

/// Maps `(seed, index)` to a uniform value in `[0, 1)`.
///
/// Used where a per-item coin must not depend on iteration order.
pub fn keyed_unit(seed: u64, index: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(index));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
