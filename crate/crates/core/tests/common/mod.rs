//! Shared helpers for the integration tests: naive-loop oracles, random
//! instance generators and the gradient-check suite.

#![allow(dead_code)]

pub mod equivalence;
pub mod fixtures;
pub mod grads;
pub mod oracle;

use diffmath::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    random_matrix(rows, cols, rng).normalize_rows()
}

pub fn one_hot(ids: &[usize], classes: usize) -> Matrix {
    Matrix::from_fn(ids.len(), classes, |r, c| if ids[r] == c { 1.0 } else { 0.0 })
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}
