//! Seeded Gaussian sampling helpers.
//!
//! All randomness in the crate flows through ChaCha8 so that a (seed, use
//! site) pair fully determines every draw, independent of platform.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::numerics::matrix::DenseMatrix;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed from a parent seed and a context label, so unrelated
/// call sites never share a stream.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    DenseMatrix::new(rows, cols, gaussian_vec(rng, rows * cols, std)).expect("shape consistent")
}
