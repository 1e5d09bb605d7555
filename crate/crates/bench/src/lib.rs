//! Fixtures shared by the benchmarks.

use css_core::{BranchLogits, ModelSpec};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `m` branches of uniform random joint logits.
pub fn random_branches(batch: usize, classes: usize, m: usize, seed: u64) -> Vec<BranchLogits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|j| {
            let v = Array2::from_shape_fn((batch, classes * m), |_| rng.random_range(-4.0..4.0));
            BranchLogits::new(v, classes, m, j).expect("valid shape")
        })
        .collect()
}

pub fn random_images(batch: usize, shape: [usize; 3], seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((batch, shape[0], shape[1], shape[2]), |_| {
        rng.random_range(-1.0..1.0)
    })
}

/// CIFAR-shaped spec of the given depth.
pub fn cifar_spec(depth: usize, branches: usize) -> ModelSpec {
    ModelSpec {
        depth,
        split_depth: 1,
        branches,
        classes: 10,
        input_shape: [3, 32, 32],
        base_width: 16,
        sample_diversity: true,
        target_diversity: true,
    }
}
