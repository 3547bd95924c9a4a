//! Seed derivation and small shared helpers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; used to mix seeds into independent streams.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over a stream label.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives an independent sub-seed from a base seed and a stream label.
///
/// Distinct labels give statistically independent streams, so consumers
/// (init, shuffling, negative sampling, perturbation) never share state.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a(label))
}

/// Derives an indexed sub-seed, e.g. one per evaluation repetition.
pub fn derive_seed_indexed(base: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(base, label).wrapping_add(splitmix64(index)))
}

/// Seeded RNG for a named stream. ChaCha8 keeps streams stable across
/// platforms and crate upgrades.
pub fn stream_rng(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_deterministic_and_label_sensitive() {
        assert_eq!(derive_seed(7, "init"), derive_seed(7, "init"));
        assert_ne!(derive_seed(7, "init"), derive_seed(7, "shuffle"));
        assert_ne!(derive_seed(7, "init"), derive_seed(8, "init"));
    }

    #[test]
    fn indexed_seeds_differ() {
        let a = derive_seed_indexed(1, "perturb", 0);
        let b = derive_seed_indexed(1, "perturb", 1);
        assert_ne!(a, b);
    }
}
