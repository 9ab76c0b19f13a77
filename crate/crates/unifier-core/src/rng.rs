//! Seeded randomness. Every stochastic choice in the crate flows through a
//! `ChaCha8Rng` seeded either directly or via `derive_seed`, so whole runs
//! replay bit-identically from their config seeds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream cipher RNG; stable across platforms and runs.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; decorrelates consecutive inputs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-mode seed derivation: a master seed plus a stream of indices
/// yields an independent child seed (per sample, per task, per layer...).
pub fn derive_seed(master: u64, indices: &[u64]) -> u64 {
    let mut acc = splitmix64(master);
    for &ix in indices {
        acc = splitmix64(acc ^ ix.wrapping_mul(0xa076_1d64_78bd_642f));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derive_seed_is_deterministic_and_index_sensitive() {
        let a = derive_seed(42, &[0, 1]);
        let b = derive_seed(42, &[0, 1]);
        let c = derive_seed(42, &[0, 2]);
        let d = derive_seed(43, &[0, 1]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn rng_replays_identically() {
        let xs: Vec<f64> = (0..8).map(|_| rng_from_seed(7).gen::<f64>()).collect();
        assert!(xs.windows(2).all(|w| w[0] == w[1]));
        let mut r1 = rng_from_seed(9);
        let mut r2 = rng_from_seed(9);
        for _ in 0..100 {
            assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
        }
    }
}
