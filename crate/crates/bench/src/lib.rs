//! Seeded fixtures shared by the benchmarks.

use fedtree_core::{Dataset, SparseExample, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense regression data with a smooth target and a little noise.
pub fn regression_data(rows: usize, features: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..rows)
        .map(|_| {
            let x: Vec<f64> = (0..features).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = x.iter().enumerate().map(|(j, v)| (v * (j + 1) as f64).sin()).sum::<f64>()
                + rng.gen_range(-0.1..0.1);
            SparseExample::from_dense(&x, y)
        })
        .collect();
    Dataset::new(examples, features, TaskKind::Regression)
}

/// Rows of uniform values in [-1, 1) with paired targets.
pub fn matrix_rows(rows: usize, width: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| ((0..width).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(-1.0..1.0)))
        .collect()
}
