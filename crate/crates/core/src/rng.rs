//! Seeded randomness.
//!
//! All stochastic steps draw from ChaCha8 streams. ChaCha is a counter-based
//! generator (64-bit block counter keyed by a 256-bit seed), so draws are
//! identical across platforms. Sub-streams for individual items are keyed by
//! mixing the global seed with the item coordinates through SplitMix64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &w in words {
        h = mix64(h ^ mix64(w.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for a sub-task identified by `coords` under `seed`.
pub fn derived(seed: u64, coords: &[u64]) -> Rng {
    let mut words = Vec::with_capacity(coords.len() + 1);
    words.push(seed);
    words.extend_from_slice(coords);
    ChaCha8Rng::seed_from_u64(hash_words(&words))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: u64 = derived(7, &[1, 2, 3]).random();
        let b: u64 = derived(7, &[1, 2, 3]).random();
        let c: u64 = derived(7, &[1, 2, 4]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn hash_is_order_sensitive() {
        assert_ne!(hash_words(&[1, 2]), hash_words(&[2, 1]));
    }
}
