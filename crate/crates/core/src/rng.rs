//! Seeded randomness.
//!
//! Every random decision in the crate flows from a single root seed through
//! named sub-streams, so that regenerating any artifact with the same seed
//! reproduces it bit for bit. The generator is xoshiro256** seeded through
//! splitmix64 (`seed_from_u64`).

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

/// The deterministic generator used throughout the crate.
pub type SeededRng = Xoshiro256StarStar;

/// Named sub-stream labels.
pub mod streams {
    pub const WORLD: &str = "world";
    pub const INIT: &str = "init";
    pub const EPISODE: &str = "episode";
    pub const DECODE: &str = "decode";
}

/// Generator for the root stream itself.
pub fn root(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Derive a named sub-stream from the root seed.
///
/// The label is folded into the seed with FNV-1a so distinct names yield
/// decorrelated streams while staying a pure function of `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> SeededRng {
    SeededRng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Sub-stream of a sub-stream, e.g. one stream per meta-iteration.
pub fn substream(seed: u64, name: &str, index: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed ^ fnv1a(name.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream() {
        let mut a = stream(7, streams::WORLD);
        let mut b = stream(7, streams::WORLD);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn named_streams_differ() {
        let mut a = stream(7, streams::WORLD);
        let mut b = stream(7, streams::INIT);
        let xs: Vec<u64> = (0..4).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.random()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn substreams_differ_by_index() {
        let mut a = substream(7, streams::EPISODE, 0);
        let mut b = substream(7, streams::EPISODE, 1);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
