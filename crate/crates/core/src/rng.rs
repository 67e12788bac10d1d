//! Seeded random streams.
//!
//! All randomness flows through [`ChaCha8Rng`]. Independent streams are
//! derived from a run seed by counter-based splitting, so a batch of
//! rollouts can be generated in any order without changing results.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The `index`-th independent stream of `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Stream `index` of a sub-seed of `seed` labelled by `domain`, so that
/// different consumers of one run seed never share random numbers.
pub fn derive(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 finalizer
    let mut z = seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    stream(z, index)
}
