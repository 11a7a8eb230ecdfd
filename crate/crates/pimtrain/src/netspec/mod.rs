//! Network descriptions: layer graph, training hyperparameters, and the
//! expansion into an ordered accelerator step sequence.

mod parse;
mod plan;

use std::fmt;

use thiserror::Error;

use crate::fxnum::{LutFn, NumericMode};

pub use parse::{parse_network, render_network};
pub use plan::{derive_phases, OpClass, Phase, PhasePlan, StepSpec, SubOp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("layer {a} ({a_kind}) output {a_out} does not fit layer {b} ({b_kind}) input {b_in}")]
    Shape {
        a: usize,
        a_kind: String,
        a_out: String,
        b: usize,
        b_kind: String,
        b_in: String,
    },
    #[error("layer {layer}: {msg}")]
    Invalid { layer: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActFn {
    Relu,
    Tanh,
    Sigmoid,
}

impl ActFn {
    pub fn lut(self) -> LutFn {
        match self {
            ActFn::Relu => LutFn::Relu,
            ActFn::Tanh => LutFn::Tanh,
            ActFn::Sigmoid => LutFn::Sigmoid,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            ActFn::Relu => "relu",
            ActFn::Tanh => "tanh",
            ActFn::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    SoftmaxCe,
}

impl LossKind {
    pub fn keyword(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::SoftmaxCe => "softmax_ce",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Elman,
    Gru,
}

impl CellKind {
    pub fn keyword(self) -> &'static str {
        match self {
            CellKind::Elman => "elman",
            CellKind::Gru => "gru",
        }
    }

    /// Number of concatenated-input weight matrices in the cell.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Elman => 1,
            CellKind::Gru => 3,
        }
    }
}

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Volume { d: usize, h: usize, w: usize },
    Vector(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Volume { d, h, w } => d * h * w,
            Shape::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_volume(&self) -> bool {
        matches!(self, Shape::Volume { .. })
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Volume { d, h, w } => write!(f, "{d}x{h}x{w} volume"),
            Shape::Vector(n) => write!(f, "vector of {n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_w: usize,
    pub in_h: usize,
    pub in_d: usize,
    pub kernels: usize,
    pub kw: usize,
    pub kh: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad + 1 - self.kw
    }

    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad + 1 - self.kh
    }

    pub fn padded_w(&self) -> usize {
        self.in_w + 2 * self.pad
    }

    pub fn padded_h(&self) -> usize {
        self.in_h + 2 * self.pad
    }

    pub fn kd(&self) -> usize {
        self.in_d
    }

    pub fn weights(&self) -> usize {
        self.kernels * self.in_d * self.kh * self.kw
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv(ConvSpec),
    MaxPool { radius: usize },
    Fc { input: usize, output: usize },
    Recurrent { input: usize, hidden: usize, steps: usize, cell: CellKind },
    Activation(ActFn),
    Loss(LossKind),
}

impl LayerKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Recurrent { .. } => "recurrent",
            LayerKind::Activation(_) => "act",
            LayerKind::Loss(_) => "loss",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv(_) | LayerKind::Fc { .. } | LayerKind::Recurrent { .. }
        )
    }

    /// Shapes of the layer's weight tensors (rows, cols); conv kernels are
    /// reported as (N_O, D_K*H_K*W_K).
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            LayerKind::Conv(c) => vec![(c.kernels, c.in_d * c.kh * c.kw)],
            LayerKind::Fc { input, output } => vec![(output, input)],
            LayerKind::Recurrent { input, hidden, cell, .. } => {
                vec![(hidden, input + hidden); cell.gates()]
            }
            _ => Vec::new(),
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv(c) => c.in_d * c.kh * c.kw,
            LayerKind::Fc { input, .. } => input,
            LayerKind::Recurrent { input, hidden, .. } => input + hidden,
            _ => 0,
        }
    }

    /// Multiply-accumulates per sample for one feedforward pass.
    pub fn ff_macs(&self) -> u64 {
        match self.kind {
            LayerKind::Conv(c) => (c.out_w() * c.out_h() * c.weights()) as u64,
            LayerKind::Fc { input, output } => (input * output) as u64,
            LayerKind::Recurrent { input, hidden, steps, cell } => {
                (steps * cell.gates() * hidden * (input + hidden)) as u64
            }
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSpec {
    pub batch: usize,
    pub lr: f64,
    pub ff: NumericMode,
    pub bp: NumericMode,
    pub up: NumericMode,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            batch: 32,
            lr: 0.01,
            ff: NumericMode::Fixed16,
            bp: NumericMode::Fixed32Sr,
            up: NumericMode::Fixed32Sr,
        }
    }
}

impl TrainSpec {
    pub fn with_modes(mut self, mode: NumericMode) -> Self {
        self.ff = mode;
        self.bp = mode;
        self.up = mode;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub train: TrainSpec,
}

impl NetworkSpec {
    /// Validate a layer list and fill in derived shapes.
    pub fn new(kinds: Vec<LayerKind>, train: TrainSpec) -> Result<Self, NetError> {
        let layers = parse::build_layers(&kinds)?;
        let net = Self { layers, train };
        net.check_train()?;
        Ok(net)
    }

    fn check_train(&self) -> Result<(), NetError> {
        let last = self.layers.len().saturating_sub(1);
        if self.train.batch == 0 {
            return Err(NetError::Invalid { layer: last, msg: "batch must be at least 1".into() });
        }
        if !self.train.lr.is_finite() || self.train.lr < 0.0 {
            return Err(NetError::Invalid { layer: last, msg: "learning rate must be finite and >= 0".into() });
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        self.layers[0].input
    }

    pub fn output_shape(&self) -> Shape {
        self.layers[self.layers.len() - 1].input
    }

    pub fn loss(&self) -> LossKind {
        match self.layers.last().map(|l| l.kind) {
            Some(LayerKind::Loss(k)) => k,
            _ => unreachable!("validated network ends in a loss layer"),
        }
    }

    /// Activation fused onto layer `i`, if the next layer is one.
    pub fn activation_after(&self, i: usize) -> Option<ActFn> {
        match self.layers.get(i + 1).map(|l| l.kind) {
            Some(LayerKind::Activation(f)) => Some(f),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.weight_shapes())
            .map(|(r, c)| r * c)
            .sum()
    }

    /// Index of the layer producing the value consumed by layer `i`,
    /// skipping fused activations.
    pub fn producer(&self, i: usize) -> Option<usize> {
        let mut j = i.checked_sub(1)?;
        while let LayerKind::Activation(_) = self.layers[j].kind {
            j = j.checked_sub(1)?;
        }
        Some(j)
    }

    /// Index of the next non-activation layer after `i`.
    pub fn consumer(&self, i: usize) -> Option<usize> {
        let mut j = i + 1;
        while j < self.layers.len() {
            if !matches!(self.layers[j].kind, LayerKind::Activation(_)) {
                return Some(j);
            }
            j += 1;
        }
        None
    }
}
