//! Shared fixtures for the criterion benches in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqc_core::{Codebook, LatentGrid};

/// A random continuous latent grid and a codebook of `k` codes.
pub fn latent_and_codebook(h: usize, w: usize, d: usize, k: usize, seed: u64) -> (LatentGrid<f32>, Codebook<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let z = LatentGrid::continuous(h, w, d, values).expect("grid");
    (z, Codebook::init(k, d, seed).expect("codebook"))
}
