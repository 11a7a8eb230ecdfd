//! Reference training engine: forward pass, backpropagation, weight
//! gradients and SGD over logical tensors, in float or emulated fixed point.

mod data;
mod engine;
pub mod ops;
mod tensor;

use rand::Rng;

use crate::fxnum::PhaseArith;
use crate::netspec::NetworkSpec;
use crate::seed::{self, Stream};

pub use data::{blobs, synthetic_batches, Batch, Target};
pub use engine::{out_gate, Backward, CellState, Engine, Forward};
pub use tensor::{read_snapshot, write_snapshot, Layout, SnapshotError, Tensor};

/// Weights per layer; each parameterized layer holds one or more row-major
/// matrices (conv kernels are (N_O, D*K*K)).
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Params {
    /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], stored at weight-update precision.
    pub fn init(net: &NetworkSpec, seed: u64) -> Self {
        let mut rng = seed::rng(seed, Stream::Weights);
        let master = PhaseArith::new(net.train.up, 1, 0);
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let b = 1.0 / (l.fan_in().max(1) as f64).sqrt();
                l.weight_shapes()
                    .into_iter()
                    .map(|(r, c)| (0..r * c).map(|_| master.quantize(rng.gen_range(-b..b))).collect())
                    .collect()
            })
            .collect();
        Self { layers }
    }

    pub fn count(&self) -> usize {
        self.layers.iter().flatten().map(|m| m.len()).sum()
    }

    pub fn to_tensors(&self, net: &NetworkSpec) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (l, mats) in net.layers.iter().zip(&self.layers) {
            for ((r, c), m) in l.weight_shapes().into_iter().zip(mats) {
                out.push(Tensor::new(vec![r, c], Layout::Matrix, net.train.up, m.clone()));
            }
        }
        out
    }
}
