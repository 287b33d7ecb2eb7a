//! Inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points drawn uniformly from the cube `[-1, 1]^3`.
pub fn cube_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

/// Row-major `n x n` Euclidean cost matrix between two point sets.
pub fn cost_matrix(x: &[[f64; 3]], y: &[[f64; 3]]) -> Vec<f64> {
    x.iter()
        .flat_map(|&a| y.iter().map(move |&b| shapeseq::geometry::sq_dist(a, b).sqrt()))
        .collect()
}
