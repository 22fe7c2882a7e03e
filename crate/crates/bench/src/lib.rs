//! Fixtures shared by the benchmarks.

use fairdp::{Mat, RngStream, TabularDataset};

/// `n` rows of `d` standard-normal features, two alternating groups, labels
/// from the sign of the first feature.
pub fn synthetic(n: usize, d: usize, seed: u64) -> TabularDataset {
    let mut rng = RngStream::new(seed, 0);
    let x: Vec<f64> = (0..n * d).map(|_| rng.standard_normal()).collect();
    let y: Vec<u8> = (0..n).map(|i| u8::from(x[i * d] > 0.0)).collect();
    let g: Vec<usize> = (0..n).map(|i| i % 2).collect();
    TabularDataset::new(Mat::from_vec(n, d, x).expect("shape"), g, y, 2).expect("valid fixture")
}
