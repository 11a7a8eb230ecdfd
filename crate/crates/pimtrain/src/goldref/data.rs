//! In-memory batches and a seeded synthetic data generator.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::netspec::NetworkSpec;
use crate::seed::{self, Stream};

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// One class index per sample.
    Labels(Vec<usize>),
    /// Regression targets laid out (element, sample).
    Values(Vec<f64>),
}

impl Target {
    pub fn value(&self, j: usize, n: usize, m: usize) -> f64 {
        match self {
            Target::Labels(l) => (l[n] == j) as u8 as f64,
            Target::Values(v) => v[j * m + n],
        }
    }
}

/// One minibatch: inputs laid out (feature, sample).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub target: Target,
    pub size: usize,
}

/// Gaussian class blobs: class means drawn uniformly in [-sep, sep]^dim,
/// samples = mean + N(0, noise^2) per feature.
pub fn blobs(seed: u64, dim: usize, classes: usize, sep: f64, noise: f64, batch: usize, count: usize) -> Vec<Batch> {
    let mut rng = seed::rng(seed, Stream::Data);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-sep..=sep)).collect())
        .collect();
    let normal = Normal::new(0.0, noise).expect("noise must be finite and non-negative");
    (0..count)
        .map(|_| {
            let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
            let mut x = vec![0.0; dim * batch];
            for (n, &c) in labels.iter().enumerate() {
                for j in 0..dim {
                    x[j * batch + n] = means[c][j] + normal.sample(&mut rng);
                }
            }
            Batch { x, target: Target::Labels(labels), size: batch }
        })
        .collect()
}

/// Blob batches shaped for `net`: one class per output element.
pub fn synthetic_batches(net: &NetworkSpec, seed: u64, count: usize) -> Vec<Batch> {
    let classes = net.output_shape().len().max(2);
    blobs(seed, net.input_shape().len(), classes, 1.0, 0.5, net.train.batch, count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let a = blobs(3, 4, 2, 1.0, 0.1, 8, 2);
        assert_eq!(a, blobs(3, 4, 2, 1.0, 0.1, 8, 2));
        assert_eq!(a[0].x.len(), 32);
        assert_ne!(a[0], a[1]);
        match &a[0].target {
            Target::Labels(l) => assert!(l.iter().all(|&c| c < 2)),
            _ => unreachable!(),
        }
    }
}
