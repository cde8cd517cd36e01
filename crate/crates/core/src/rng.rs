//! Seeded RNG helpers.
//!
//! All randomness in the crate flows from explicit `u64` seeds through
//! ChaCha8, so any pipeline stage can be replayed bit-exactly. Sub-streams
//! are derived by mixing a label into the base seed, which keeps independent
//! consumers (init, batching, sampling) decoupled from each other's draw
//! counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label bytes; stable across platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive an independent sub-seed from a base seed and a stream label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a(label.as_bytes()))
}

/// Seeded RNG for a labeled sub-stream.
pub fn seeded(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

/// Seeded RNG directly from a raw seed.
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a = derive_seed(7, "init");
        assert_eq!(a, derive_seed(7, "init"));
        assert_ne!(a, derive_seed(7, "batch"));
        assert_ne!(a, derive_seed(8, "init"));
    }

    #[test]
    fn seeded_rng_replays() {
        let mut r1 = seeded(42, "x");
        let mut r2 = seeded(42, "x");
        let a: [u64; 4] = std::array::from_fn(|_| r1.random());
        let b: [u64; 4] = std::array::from_fn(|_| r2.random());
        assert_eq!(a, b);
    }
}
