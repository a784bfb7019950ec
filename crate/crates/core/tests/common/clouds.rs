//! Gaussian test data.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    let n = Normal::new(0.0, sigma).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// `n` observations per class, classes 1 and 2 offset by `±sep` along the
/// first feature.
pub fn two_clouds(rng: &mut ChaCha8Rng, n: usize, d: usize, sep: f64) -> (Array2<f64>, Vec<i32>) {
    let mut x = noise(rng, 2 * n, d, 1.0);
    let labels: Vec<i32> = (0..2 * n).map(|i| 1 + (i % 2) as i32).collect();
    for (mut row, &y) in x.rows_mut().into_iter().zip(&labels) {
        row[0] += if y == 1 { sep } else { -sep };
    }
    (x, labels)
}
