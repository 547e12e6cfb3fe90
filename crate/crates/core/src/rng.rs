//! Seeded random streams. Everything random in the crate flows through here so
//! that a single integer seed reproduces a run bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (splitmix64 finalizer), so that
/// per-sample and per-epoch streams never overlap for distinct indices.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw in `[0, 1)`.
pub fn unit(rng: &mut SeededRng) -> f64 {
    rng.gen::<f64>()
}

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Fisher-Yates shuffle driven by the seeded stream.
pub fn shuffle<T>(rng: &mut SeededRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut r1 = seeded(derive_seed(7, 1));
        let mut r2 = seeded(derive_seed(7, 1));
        let mut r3 = seeded(derive_seed(7, 2));
        let x1 = unit(&mut r1);
        assert_eq!(x1.to_bits(), unit(&mut r2).to_bits());
        assert_ne!(x1.to_bits(), unit(&mut r3).to_bits());
    }
}
