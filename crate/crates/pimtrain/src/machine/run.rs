//! Training driver: owns the compiled program, vault memory and arithmetic,
//! and records a timing trace per executed step.

use std::fmt::Write;

use serde::Serialize;

use crate::compiler::{compile, BitMode, CompileError, Compiled};
use crate::goldref::{ops, Batch, Params};
use crate::netspec::{NetworkSpec, OpClass, Phase};
use crate::pmag::PmagError;
use crate::seed;

use super::exec::{execute, Arith};
use super::tiles::plan as tile_plan;
use super::timing::{simulate, Deadlock, Stalls, Timing};
use super::{MachineConfig, VaultMemory};

#[derive(Debug, thiserror::Error)]
pub enum MachineError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Pmag(#[from] PmagError),
    #[error("step {step}: {source}")]
    Deadlock { step: String, source: Deadlock },
    #[error("{0}")]
    Input(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepTrace {
    pub batch: usize,
    pub index: usize,
    pub step: String,
    pub phase: Phase,
    pub op: OpClass,
    pub bit_mode: String,
    pub cycles: u64,
    pub vault_read: Vec<u64>,
    pub vault_written: Vec<u64>,
    pub bus_broadcast: u64,
    pub bus_merged: u64,
    /// MAC operations (comparisons for pooling).
    pub mac_ops: u64,
    pub busy: u64,
    pub stall_buffer_empty: u64,
    pub stall_bus: u64,
    pub stall_writeback: u64,
    pub saturations: u64,
}

impl StepTrace {
    pub fn stalls(&self) -> Stalls {
        Stalls { buffer_empty: self.stall_buffer_empty, bus_contention: self.stall_bus, writeback: self.stall_writeback }
    }

    pub fn bytes_read(&self) -> u64 {
        self.vault_read.iter().sum()
    }

    pub fn bytes_written(&self) -> u64 {
        self.vault_written.iter().sum()
    }

    pub const CSV_HEADER: &'static str = "batch,index,step,phase,op,bit_mode,cycles,bytes_read,bytes_written,bus_broadcast,bus_merged,mac_ops,busy,stall_buffer_empty,stall_bus,stall_writeback,saturations";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:?},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.batch,
            self.index,
            self.step.replace(',', ";"),
            self.phase,
            self.op,
            self.bit_mode,
            self.cycles,
            self.bytes_read(),
            self.bytes_written(),
            self.bus_broadcast,
            self.bus_merged,
            self.mac_ops,
            self.busy,
            self.stall_buffer_empty,
            self.stall_bus,
            self.stall_writeback,
            self.saturations
        )
    }
}

pub fn trace_csv(traces: &[StepTrace]) -> String {
    let mut s = String::from(StepTrace::CSV_HEADER);
    s.push('\n');
    for t in traces {
        let _ = writeln!(s, "{}", t.csv_row());
    }
    s
}

pub struct Machine<'a> {
    pub net: &'a NetworkSpec,
    pub cfg: MachineConfig,
    pub compiled: Compiled,
    pub mem: VaultMemory,
    pub arith: Arith,
    /// Skip the functional effect and only time the steps.
    pub timing_only: bool,
    timings: Vec<Option<Timing>>,
    batches: usize,
}

impl<'a> Machine<'a> {
    /// Compile `net` and load weights drawn from `seed`.
    pub fn new(net: &'a NetworkSpec, cfg: &MachineConfig, seed: u64) -> Result<Self, MachineError> {
        let compiled = compile(net, cfg)?;
        let mem = VaultMemory::new(&compiled.layout);
        let s = seed::rounding_seeds(seed);
        let arith = Arith {
            ff: crate::fxnum::PhaseArith::new(net.train.ff, cfg.lanes, s[0]),
            bp: crate::fxnum::PhaseArith::new(net.train.bp, cfg.lanes, s[1]),
            up: crate::fxnum::PhaseArith::new(net.train.up, cfg.lanes, s[2]),
        };
        let n = compiled.steps.len();
        let mut m =
            Self { net, cfg: cfg.clone(), compiled, mem, arith, timing_only: false, timings: vec![None; n], batches: 0 };
        m.load_params(&Params::init(net, seed));
        Ok(m)
    }

    pub fn load_params(&mut self, p: &Params) {
        let lay = &self.compiled.layout;
        for (lt, mats) in lay.layers.iter().zip(&p.layers) {
            for (&t, w) in lt.w.iter().zip(mats) {
                self.mem.load(lay, t, w);
            }
        }
    }

    pub fn params(&self) -> Params {
        let lay = &self.compiled.layout;
        Params { layers: lay.layers.iter().map(|lt| lt.w.iter().map(|&t| self.mem.fetch(lay, t)).collect()).collect() }
    }

    /// Network output (element, sample) after the last forward pass.
    pub fn output(&self) -> Vec<f64> {
        let net = self.net;
        let lay = &self.compiled.layout;
        let m = net.train.batch;
        let p = net.producer(net.layers.len() - 1).expect("loss has a producer");
        let v = lay.layers[p].y.expect("producer output");
        let c = net.output_shape().len();
        let mut y = vec![0.0; c * m];
        for j in 0..c {
            for n in 0..m {
                y[j * m + n] = self.mem.read(lay, v.tensor, v.at(j, n), None);
            }
        }
        y
    }

    pub fn step_timing(&mut self, i: usize) -> Result<Timing, MachineError> {
        if let Some(t) = &self.timings[i] {
            return Ok(t.clone());
        }
        let st = &self.compiled.steps[i];
        let plan = tile_plan(self.net, &self.compiled.layout, &self.cfg, st);
        let t = simulate(&plan, &self.cfg)
            .map_err(|source| MachineError::Deadlock { step: st.step.to_string(), source })?;
        self.timings[i] = Some(t.clone());
        Ok(t)
    }

    /// Run every step on one minibatch. Returns the loss before the update and
    /// the per-step traces.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<(f64, Vec<StepTrace>), MachineError> {
        let net = self.net;
        let m = net.train.batch;
        if batch.size != m || batch.x.len() != net.input_shape().len() * m {
            return Err(MachineError::Input(format!(
                "batch of {} samples with {} values does not match the network",
                batch.size,
                batch.x.len()
            )));
        }
        if !self.timing_only {
            let lay = &self.compiled.layout;
            let x: Vec<f64> = batch.x.iter().map(|&v| self.arith.ff.quantize(v)).collect();
            self.mem.load(lay, lay.input, &x);
        }
        let mut loss = f64::NAN;
        let mut traces = Vec::with_capacity(self.compiled.steps.len());
        for i in 0..self.compiled.steps.len() {
            let timing = self.step_timing(i)?;
            let st = &self.compiled.steps[i];
            let before = self.arith.phase(st.step.phase).saturations();
            if !self.timing_only {
                if st.step.op == OpClass::LossEval {
                    let y = self.output();
                    loss = ops::loss_value(net.loss(), &y, &batch.target, y.len() / m, m);
                }
                execute(net, &self.compiled.layout, st, &mut self.mem, &mut self.arith, &batch.target)?;
            }
            let st = &self.compiled.steps[i];
            let mode = if matches!(st.step.op, OpClass::LossEval) || st.step.sub.is_elementwise() {
                crate::compiler::bit_mode(match st.step.phase {
                    Phase::FF | Phase::Prep => net.train.ff,
                    Phase::BP => net.train.bp,
                    Phase::UP => net.train.up,
                })
            } else {
                st.pe.mode
            };
            traces.push(StepTrace {
                batch: self.batches,
                index: i,
                step: st.step.to_string(),
                phase: st.step.phase,
                op: st.step.op,
                bit_mode: mode_label(mode),
                cycles: timing.cycles,
                vault_read: timing.vault_read,
                vault_written: timing.vault_written,
                bus_broadcast: timing.bus_broadcast,
                bus_merged: timing.bus_merged,
                mac_ops: timing.ops,
                busy: timing.busy,
                stall_buffer_empty: timing.stalls.buffer_empty,
                stall_bus: timing.stalls.bus_contention,
                stall_writeback: timing.stalls.writeback,
                saturations: self.arith.phase(st.step.phase).saturations() - before,
            });
        }
        self.batches += 1;
        Ok((loss, traces))
    }
}

fn mode_label(m: BitMode) -> String {
    m.to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRun {
    pub params: Params,
    pub traces: Vec<StepTrace>,
    /// Loss per minibatch, before its update.
    pub losses: Vec<f64>,
}

/// Train over `batches` for `epochs` passes, weights drawn from `seed`.
pub fn run_training(
    net: &NetworkSpec,
    batches: &[Batch],
    epochs: usize,
    cfg: &MachineConfig,
    seed: u64,
) -> Result<TrainingRun, MachineError> {
    let mut m = Machine::new(net, cfg, seed)?;
    let mut traces = Vec::new();
    let mut losses = Vec::new();
    for _ in 0..epochs {
        for b in batches {
            let (loss, t) = m.train_batch(b)?;
            losses.push(loss);
            traces.extend(t);
        }
    }
    Ok(TrainingRun { params: m.params(), traces, losses })
}
