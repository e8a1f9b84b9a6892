//! Fixtures shared by the criterion benches.

use al_forge_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `n` points in `d` dimensions around `k` well separated centers, with
/// weights in (0, 1].
pub fn clustered_points(n: usize, d: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
    let points = (0..n)
        .map(|i| centers[i % k].iter().map(|c| c + rng.random_range(-1.0..1.0)).collect())
        .collect();
    let weights = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    (points, weights)
}
