//! Keyed synthetic inputs; each value depends only on the seed and its position.

use imc_core::f64::Matrix;
use imc_core::rng::{self, stream};

pub fn uniform(seed: u64, tag: u64, i: u64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::uniform(rng::key(seed, &[stream::DATA, tag, i]))
}

pub fn vector(seed: u64, tag: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|i| uniform(seed, tag, i as u64, lo, hi)).collect()
}

pub fn matrix(seed: u64, tag: u64, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| uniform(seed, tag, (i * cols + j) as u64, lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_and_in_range() {
        let a = vector(3, 1, 100, -1.0, 1.0);
        assert_eq!(a, vector(3, 1, 100, -1.0, 1.0));
        assert_ne!(a, vector(3, 2, 100, -1.0, 1.0));
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
        let m = matrix(3, 1, 10, 10, -1.0, 1.0);
        assert_eq!(m.data, vector(3, 1, 100, -1.0, 1.0));
    }
}
