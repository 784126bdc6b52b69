//! Seeded, platform-independent randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a label.
pub fn derived(seed: u64, label: &str) -> SeededRng {
    let mut h = Sha256::new();
    h.update(b"pand-stream");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

pub fn gaussian<T: Scalar>(rng: &mut SeededRng, std: f64) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z * std)
}

pub fn gaussian_vec<T: Scalar>(rng: &mut SeededRng, n: usize, std: f64) -> Vec<T> {
    (0..n).map(|_| gaussian(rng, std)).collect()
}

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Fisher-Yates shuffle driven by the seeded stream.
pub fn shuffle<T>(rng: &mut SeededRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
