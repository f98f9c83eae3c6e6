//! Shared fixtures for the benchmarks.

use evop_core::interpret::DescriptorLibrary;
use evop_core::{Activation, DMatrix, Encoder, EncoderConfig, Predictor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// The Lorenz architecture: 3 -> 16 -> 16 -> 8 with the raw state appended.
pub fn lorenz_encoder(seed: u64) -> (Encoder, Predictor) {
    Encoder::initialized(EncoderConfig {
        input_dim: 3,
        hidden_dims: vec![16, 16],
        latent_dim: 8,
        activation: Activation::Relu,
        append_raw_state: true,
        simnorm_group: 0,
        seed,
        input_scaling: None,
    })
    .expect("valid architecture")
}

/// Standardized random descriptors with a sparse linear target.
pub fn lasso_problem(n: usize, p: usize, seed: u64) -> (DescriptorLibrary, Vec<f64>) {
    let raw = random_matrix(n, p, seed);
    let names = (0..p).map(|j| format!("d{j}")).collect();
    let lib = DescriptorLibrary::from_columns(names, &raw).expect("non-constant columns");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let target = (0..n)
        .map(|r| 2.0 * lib.matrix[(r, 0)] - lib.matrix[(r, p / 2)] + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    (lib, target)
}
