//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scsi_core::{Architecture, Regressor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The default two-dimensional regressor with random weights.
pub fn network(hidden: usize) -> Regressor {
    let arch = Architecture { hidden: vec![hidden; 3], ..Architecture::default_for(2, 0) };
    Regressor::init(arch, 1.0, &mut rng(0)).expect("valid architecture")
}

pub fn uniform_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((n, d), |_| r.random::<f64>() * 2.0 - 1.0)
}
