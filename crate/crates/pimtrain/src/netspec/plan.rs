//! Expansion of a network into the ordered accelerator step sequence.

use std::fmt;

use super::{CellKind, LayerKind, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum Phase {
    FF,
    BP,
    UP,
    Prep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum OpClass {
    ConvFF,
    ConvBP,
    ConvUP,
    Pool,
    PoolBP,
    FCFF,
    FCBP,
    FCUP,
    LossEval,
    Merge,
    Partition,
    AddPad,
    RemovePad,
}

impl OpClass {
    pub const ALL: [OpClass; 13] = [
        OpClass::ConvFF,
        OpClass::ConvBP,
        OpClass::ConvUP,
        OpClass::Pool,
        OpClass::PoolBP,
        OpClass::FCFF,
        OpClass::FCBP,
        OpClass::FCUP,
        OpClass::LossEval,
        OpClass::Merge,
        OpClass::Partition,
        OpClass::AddPad,
        OpClass::RemovePad,
    ];

    pub fn code(self) -> u8 {
        OpClass::ALL.iter().position(|&o| o == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        OpClass::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpClass::ConvFF => "Conv-FF",
            OpClass::ConvBP => "Conv-BP",
            OpClass::ConvUP => "Conv-UP",
            OpClass::Pool => "Pool",
            OpClass::PoolBP => "Pool-BP",
            OpClass::FCFF => "FC-FF",
            OpClass::FCBP => "FC-BP",
            OpClass::FCUP => "FC-UP",
            OpClass::LossEval => "Loss",
            OpClass::Merge => "Merge",
            OpClass::Partition => "Partition",
            OpClass::AddPad => "Add pad",
            OpClass::RemovePad => "Remove pad",
        }
    }

    pub fn is_prep(self) -> bool {
        matches!(self, OpClass::Merge | OpClass::Partition | OpClass::AddPad | OpClass::RemovePad)
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Refinement of FC-class steps belonging to a recurrent cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubOp {
    None,
    /// Elman cell: h = tanh(W [x; h]).
    Cell,
    GateZ,
    GateR,
    GateN,
    /// r * h, input of the candidate gate.
    ResetMul,
    /// h' = n + z * (h - n).
    Combine,
    /// Gradients through the combine step and the gate nonlinearities.
    CombineGrad,
    /// Gradients through r * h.
    ResetGrad,
    /// Sum of the per-gate input and state gradients.
    GradSum,
}

impl SubOp {
    pub const ALL: [SubOp; 10] = [
        SubOp::None,
        SubOp::Cell,
        SubOp::GateZ,
        SubOp::GateR,
        SubOp::GateN,
        SubOp::ResetMul,
        SubOp::Combine,
        SubOp::CombineGrad,
        SubOp::ResetGrad,
        SubOp::GradSum,
    ];

    pub fn is_elementwise(self) -> bool {
        matches!(self, SubOp::ResetMul | SubOp::Combine | SubOp::CombineGrad | SubOp::ResetGrad | SubOp::GradSum)
    }

    /// Weight matrix index inside a GRU layer.
    pub fn gate_index(self) -> Option<usize> {
        match self {
            SubOp::Cell | SubOp::GateZ => Some(0),
            SubOp::GateR => Some(1),
            SubOp::GateN => Some(2),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        SubOp::ALL.iter().position(|&o| o == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        SubOp::ALL.get(c as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StepSpec {
    pub phase: Phase,
    pub layer: usize,
    pub op: OpClass,
    pub time: Option<usize>,
    pub sub: SubOp,
}

impl StepSpec {
    fn new(phase: Phase, layer: usize, op: OpClass) -> Self {
        Self { phase, layer, op, time: None, sub: SubOp::None }
    }

    fn at(mut self, t: usize, sub: SubOp) -> Self {
        self.time = Some(t);
        self.sub = sub;
        self
    }
}

impl fmt::Display for StepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} L{} {}", self.phase, self.layer, self.op)?;
        if let Some(t) = self.time {
            write!(f, " t={t}")?;
        }
        if self.sub != SubOp::None {
            write!(f, " {:?}", self.sub)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePlan {
    pub steps: Vec<StepSpec>,
}

impl PhasePlan {
    pub fn count(&self, op: OpClass) -> usize {
        self.steps.iter().filter(|s| s.op == op).count()
    }

    pub fn ops(&self) -> Vec<OpClass> {
        self.steps.iter().map(|s| s.op).collect()
    }
}

fn gru_ff(layer: usize, t: usize, out: &mut Vec<StepSpec>) {
    for sub in [SubOp::GateZ, SubOp::GateR, SubOp::ResetMul, SubOp::GateN, SubOp::Combine] {
        out.push(StepSpec::new(Phase::FF, layer, OpClass::FCFF).at(t, sub));
    }
}

fn gru_bp(layer: usize, t: usize, out: &mut Vec<StepSpec>) {
    for sub in [
        SubOp::CombineGrad,
        SubOp::GateN,
        SubOp::ResetGrad,
        SubOp::GateR,
        SubOp::GateZ,
        SubOp::GradSum,
    ] {
        out.push(StepSpec::new(Phase::BP, layer, OpClass::FCBP).at(t, sub));
    }
}

pub fn derive_phases(net: &NetworkSpec) -> PhasePlan {
    let mut steps = Vec::new();
    let volume_input = |i: usize| net.producer(i).is_some_and(|p| net.layers[p].output.is_volume());
    let merges_input = |i: usize| {
        matches!(net.layers[i].kind, LayerKind::Fc { .. } | LayerKind::Recurrent { .. }) && volume_input(i)
    };

    for (i, l) in net.layers.iter().enumerate() {
        match l.kind {
            LayerKind::Conv(c) => {
                if c.pad > 0 {
                    steps.push(StepSpec::new(Phase::Prep, i, OpClass::AddPad));
                }
                steps.push(StepSpec::new(Phase::FF, i, OpClass::ConvFF));
            }
            LayerKind::MaxPool { .. } => steps.push(StepSpec::new(Phase::FF, i, OpClass::Pool)),
            LayerKind::Fc { .. } => {
                if merges_input(i) {
                    steps.push(StepSpec::new(Phase::Prep, net.producer(i).unwrap(), OpClass::Merge));
                }
                steps.push(StepSpec::new(Phase::FF, i, OpClass::FCFF));
            }
            LayerKind::Recurrent { steps: t_max, cell, .. } => {
                if merges_input(i) {
                    steps.push(StepSpec::new(Phase::Prep, net.producer(i).unwrap(), OpClass::Merge));
                }
                for t in 0..t_max {
                    match cell {
                        CellKind::Elman => {
                            steps.push(StepSpec::new(Phase::FF, i, OpClass::FCFF).at(t, SubOp::Cell))
                        }
                        CellKind::Gru => gru_ff(i, t, &mut steps),
                    }
                }
            }
            LayerKind::Activation(_) => {}
            LayerKind::Loss(_) => steps.push(StepSpec::new(Phase::BP, i, OpClass::LossEval)),
        }
    }

    for (i, l) in net.layers.iter().enumerate().rev() {
        match l.kind {
            LayerKind::Conv(_) => steps.push(StepSpec::new(Phase::BP, i, OpClass::ConvBP)),
            LayerKind::MaxPool { .. } => steps.push(StepSpec::new(Phase::BP, i, OpClass::PoolBP)),
            LayerKind::Fc { .. } => {
                steps.push(StepSpec::new(Phase::BP, i, OpClass::FCBP));
                if merges_input(i) {
                    steps.push(StepSpec::new(Phase::Prep, i, OpClass::Partition));
                }
            }
            LayerKind::Recurrent { steps: t_max, cell, .. } => {
                for t in (0..t_max).rev() {
                    match cell {
                        CellKind::Elman => {
                            steps.push(StepSpec::new(Phase::BP, i, OpClass::FCBP).at(t, SubOp::Cell))
                        }
                        CellKind::Gru => gru_bp(i, t, &mut steps),
                    }
                }
                if merges_input(i) {
                    steps.push(StepSpec::new(Phase::Prep, i, OpClass::Partition));
                }
            }
            LayerKind::Activation(_) | LayerKind::Loss(_) => {}
        }
    }

    for (i, l) in net.layers.iter().enumerate().rev() {
        match l.kind {
            LayerKind::Conv(_) => steps.push(StepSpec::new(Phase::UP, i, OpClass::ConvUP)),
            LayerKind::Fc { .. } | LayerKind::Recurrent { .. } => {
                steps.push(StepSpec::new(Phase::UP, i, OpClass::FCUP))
            }
            _ => {}
        }
    }
    PhasePlan { steps }
}
