//! Throughput, energy and scale-out figures.

mod power;

pub use power::PowerTable;

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use crate::compiler::BitMode;
use crate::machine::{MachineConfig, StepTrace};
use crate::netspec::OpClass;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("step '{0}' took zero cycles")]
    ZeroCycles(String),
}

/// Operand pairs each lane consumes per cycle.
pub fn pairs_per_lane(mode: BitMode) -> f64 {
    match mode {
        BitMode::B16 => 2.0,
        BitMode::B32 | BitMode::B32Sr => 1.0,
    }
}

/// Peak ops/s: clock x PEs x lanes x pairs x 2 (multiply and add).
pub fn peak(cfg: &MachineConfig, mode: BitMode) -> f64 {
    cfg.clock_hz * cfg.pes as f64 * cfg.lanes as f64 * pairs_per_lane(mode) * 2.0
}

fn mode_of(t: &StepTrace) -> BitMode {
    match t.bit_mode.as_str() {
        "16" => BitMode::B16,
        "32" => BitMode::B32,
        _ => BitMode::B32Sr,
    }
}

/// Achieved ops/s of one step; each MAC counts as two ops.
pub fn throughput(t: &StepTrace, cfg: &MachineConfig) -> Result<f64, MetricsError> {
    if t.cycles == 0 {
        return Err(MetricsError::ZeroCycles(t.step.clone()));
    }
    Ok(t.mac_ops as f64 * 2.0 / (t.cycles as f64 / cfg.clock_hz))
}

/// Throughput as a fraction of the peak for the step's bit mode.
pub fn utilization(t: &StepTrace, cfg: &MachineConfig) -> Result<f64, MetricsError> {
    Ok(throughput(t, cfg)? / peak(cfg, mode_of(t)))
}

/// DRAM power for `bytes` moved in `seconds`.
pub fn dram_power(bytes: f64, seconds: f64, table: &PowerTable) -> f64 {
    bytes * 8.0 * table.dram_pj_per_bit * 1e-12 / seconds
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnergyReport {
    pub seconds: f64,
    pub ops: f64,
    pub dram_bytes: u64,
    pub logic_joules: f64,
    pub dram_joules: f64,
    pub average_watts: f64,
    pub gflops_per_watt: f64,
}

/// Logic power is drawn only while a step does work; DRAM energy follows
/// the bytes moved.
pub fn energy(traces: &[StepTrace], table: &PowerTable, cfg: &MachineConfig) -> EnergyReport {
    let mut r = EnergyReport::default();
    for t in traces {
        let secs = t.cycles as f64 / cfg.clock_hz;
        let bytes = t.bytes_read() + t.bytes_written();
        r.seconds += secs;
        r.ops += t.mac_ops as f64 * 2.0;
        r.dram_bytes += bytes;
        r.dram_joules += bytes as f64 * 8.0 * table.dram_pj_per_bit * 1e-12;
        if t.mac_ops > 0 || bytes > 0 {
            r.logic_joules += table.logic_die * secs;
        }
    }
    let joules = r.logic_joules + r.dram_joules;
    if r.seconds > 0.0 {
        r.average_watts = joules / r.seconds;
    }
    if joules > 0.0 {
        r.gflops_per_watt = r.ops / joules / 1e9;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScaleOutParams {
    pub modules: usize,
    /// Minibatch training latency of one module (s).
    pub t1: f64,
    /// Host weight update per module gradient (s).
    pub t_up: f64,
    /// One-way link transfer (s).
    pub t_link: f64,
    pub batch: usize,
}

impl ScaleOutParams {
    /// The VGG16 example: 4 modules, 63.1 ms, 42.4 ms, 4.61 ms, batch 32.
    pub fn vgg16(modules: usize) -> Self {
        Self { modules, t1: 63.1e-3, t_up: 42.4e-3, t_link: 4.61e-3, batch: 32 }
    }

    /// Host update and link times from parameter count, host FLOPS and link
    /// bandwidth; `ops_per_param` and `bytes_per_param` are free constants.
    pub fn from_host(
        modules: usize,
        t1: f64,
        params: f64,
        (ops_per_param, host_flops): (f64, f64),
        (bytes_per_param, link_bytes_per_sec): (f64, f64),
        batch: usize,
    ) -> Self {
        Self {
            modules,
            t1,
            t_up: params * ops_per_param / host_flops,
            t_link: params * bytes_per_param / link_bytes_per_sec,
            batch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScaleOut {
    pub modules: usize,
    pub total_s: f64,
    pub images_per_s: f64,
}

pub fn scaleout(p: &ScaleOutParams) -> ScaleOut {
    let n = p.modules as f64;
    let total = p.t1 + n * p.t_up + 2.0 * n * p.t_link;
    ScaleOut { modules: p.modules, total_s: total, images_per_s: n * p.batch as f64 / total }
}

pub fn scaleout_sweep(base: &ScaleOutParams, max_modules: usize) -> Vec<ScaleOut> {
    (1..=max_modules).map(|n| scaleout(&ScaleOutParams { modules: n, ..*base })).collect()
}

pub fn scaleout_table(rows: &[ScaleOut]) -> String {
    let mut s = format!("{:>7} {:>12} {:>12}\n", "modules", "latency_ms", "images/s");
    for r in rows {
        let _ = writeln!(s, "{:>7} {:>12.2} {:>12.1}", r.modules, r.total_s * 1e3, r.images_per_s);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpSummary {
    pub op: OpClass,
    pub bit_mode: String,
    pub steps: usize,
    pub cycles: u64,
    pub mac_ops: u64,
    pub ops_per_s: f64,
    pub utilization: f64,
    pub stall_buffer_empty: u64,
    pub stall_bus: u64,
    pub stall_writeback: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub machine: String,
    pub peak_16: f64,
    pub peak_32: f64,
    pub total_cycles: u64,
    pub per_op: Vec<OpSummary>,
    pub energy: EnergyReport,
}

/// Aggregate traces per op class and bit mode.
pub fn report(traces: &[StepTrace], cfg: &MachineConfig) -> Report {
    let mut groups: BTreeMap<(OpClass, String), Vec<&StepTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry((t.op, t.bit_mode.clone())).or_default().push(t);
    }
    let per_op = groups
        .into_iter()
        .map(|((op, bit_mode), ts)| {
            let cycles: u64 = ts.iter().map(|t| t.cycles).sum();
            let mac_ops: u64 = ts.iter().map(|t| t.mac_ops).sum();
            let ops_per_s = if cycles > 0 { mac_ops as f64 * 2.0 * cfg.clock_hz / cycles as f64 } else { 0.0 };
            let mode = mode_of(ts[0]);
            OpSummary {
                op,
                bit_mode,
                steps: ts.len(),
                cycles,
                mac_ops,
                ops_per_s,
                utilization: ops_per_s / peak(cfg, mode),
                stall_buffer_empty: ts.iter().map(|t| t.stall_buffer_empty).sum(),
                stall_bus: ts.iter().map(|t| t.stall_bus).sum(),
                stall_writeback: ts.iter().map(|t| t.stall_writeback).sum(),
            }
        })
        .collect();
    Report {
        machine: cfg.name.clone(),
        peak_16: peak(cfg, BitMode::B16),
        peak_32: peak(cfg, BitMode::B32),
        total_cycles: traces.iter().map(|t| t.cycles).sum(),
        per_op,
        energy: energy(traces, &cfg.power, cfg),
    }
}

impl Report {
    pub fn text(&self) -> String {
        let mut s = format!(
            "machine {}  peak {:.2} TOPS/s (16-bit) {:.2} TOPS/s (32-bit)  cycles {}\n",
            self.machine,
            self.peak_16 / 1e12,
            self.peak_32 / 1e12,
            self.total_cycles
        );
        let _ = writeln!(
            s,
            "{:<11} {:>5} {:>5} {:>12} {:>14} {:>9} {:>6} {:>12} {:>12} {:>12}",
            "op", "bits", "steps", "cycles", "mac_ops", "TOPS/s", "util", "stall_empty", "stall_bus", "stall_wb"
        );
        for o in &self.per_op {
            let _ = writeln!(
                s,
                "{:<11} {:>5} {:>5} {:>12} {:>14} {:>9.3} {:>5.1}% {:>12} {:>12} {:>12}",
                o.op.to_string(),
                o.bit_mode,
                o.steps,
                o.cycles,
                o.mac_ops,
                o.ops_per_s / 1e12,
                o.utilization * 100.0,
                o.stall_buffer_empty,
                o.stall_bus,
                o.stall_writeback
            );
        }
        let e = &self.energy;
        let _ = writeln!(
            s,
            "time {:.6} s  DRAM {:.4} J  logic {:.4} J  power {:.3} W  {:.1} GFLOPS/W",
            e.seconds, e.dram_joules, e.logic_joules, e.average_watts, e.gflops_per_watt
        );
        s
    }
}

#[cfg(test)]
mod tests;
