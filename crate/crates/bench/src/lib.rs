//! Fixtures shared by the benchmarks.

use faar_core::pipeline::gaussian_matrix;
use faar_core::{CalibBatch, LinearLayer, Tensor};

/// A `out × inp` Gaussian layer scaled by `1/√inp` with one Gaussian calibration batch.
pub fn gaussian_layer(out: usize, inp: usize, rows: usize, seed: u64) -> (LinearLayer, CalibBatch) {
    let w = gaussian_matrix(out, inp, seed).map(|v| v / (inp as f64).sqrt());
    let layer = LinearLayer::new("bench", w).expect("valid layer");
    let batch = CalibBatch::new(gaussian_matrix(rows, inp, seed + 1), 16).expect("valid batch");
    (layer, batch)
}

pub fn gaussian_vector(n: usize, seed: u64) -> Tensor {
    gaussian_matrix(1, n, seed)
}
