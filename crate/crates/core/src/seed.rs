//! Seed derivation for independent random streams.
//!
//! Every stochastic step (bootstrap draw of tree `i`, shuffle of feature `j`
//! in repeat `r`, ...) gets its own generator seeded from a hash of the
//! master seed and the step's coordinates. Streams therefore do not depend on
//! the order in which parallel workers happen to run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep coordinates from different subsystems apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Bootstrap = 1,
    TreeGrowth = 2,
    Permutation = 3,
    Stability = 4,
    Holdout = 5,
    Synth = 6,
    Resample = 7,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `master`, the stream tag and each coordinate through SplitMix64.
pub fn derive(master: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ (stream as u64).wrapping_mul(GOLDEN));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c));
    }
    h
}

pub fn rng(master: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, coords))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_and_streams_separate() {
        let a = derive(7, Stream::Bootstrap, &[0]);
        assert_eq!(a, derive(7, Stream::Bootstrap, &[0]));
        assert_ne!(a, derive(7, Stream::Bootstrap, &[1]));
        assert_ne!(a, derive(7, Stream::TreeGrowth, &[0]));
        assert_ne!(a, derive(8, Stream::Bootstrap, &[0]));
        assert_ne!(
            derive(1, Stream::Permutation, &[2, 3]),
            derive(1, Stream::Permutation, &[3, 2])
        );
    }
}
