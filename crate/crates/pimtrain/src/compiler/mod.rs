//! Translation of a phase plan into vault layouts, PMAG/PE programs and the
//! packed iBuffer image.

mod emit;
mod ibuffer;
mod layout;
mod program;

pub use emit::{bit_mode, blocking, emit_pe, emit_pmag, emit_step, pad_programs, partition_programs, rects, Rect};
pub use ibuffer::{pack_entry, pack_ibuffer, unpack_entry, unpack_ibuffer, IBufferEntry, IBufferImage, ENTRY_BYTES};
pub use layout::{
    conv_strips, lowered_footprint, plan_layout, CellTensors, LayerTensors, LayoutPlan, Placement, TensorId,
    TensorInfo, View,
};
pub use program::{
    BitMode, BusRole, Comparator, Dir, Gating, Mux, PeOp, PeProgram, PeWork, PmagProgram, Segment, Src,
    StepPrograms, R1, R2, R3, R4, R5, R6, R7,
};

use std::fmt::Write;

use crate::machine::MachineConfig;
use crate::netspec::{derive_phases, ConvSpec, LayerKind, NetworkSpec, PhasePlan};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CompileError {
    #[error("vault {vault} needs {needed} B but holds {capacity} B (largest tensor {tensor})")]
    Capacity { vault: usize, needed: u64, capacity: u64, tensor: String },
    #[error("{what} needs {needed} B but half an input buffer holds {half} B")]
    Buffer { what: String, needed: usize, half: usize },
    #[error("iBuffer image needs {needed} B for {entries} entries; capacity is {capacity} B")]
    IBuffer { needed: usize, capacity: usize, entries: usize },
    #[error("{field} value {value} does not fit in {bits} bits")]
    Field { field: &'static str, value: u64, bits: u32 },
    #[error("internal: {0}")]
    Internal(String),
}

/// Operation extents the timing model tiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepGeom {
    Conv { spec: ConvSpec, n: usize },
    /// Weight-like operand of rows x cols against m activation columns.
    Matrix { rows: usize, cols: usize, m: usize },
    Pool { d: usize, h: usize, w: usize, r: usize, n: usize },
    /// Data movement or element-wise work over `elems` elements.
    Stream { elems: usize },
}

#[derive(Clone, Debug)]
pub struct Compiled {
    pub plan: PhasePlan,
    pub layout: LayoutPlan,
    pub steps: Vec<StepPrograms>,
    pub image: IBufferImage,
}

pub fn compile(net: &NetworkSpec, cfg: &MachineConfig) -> Result<Compiled, CompileError> {
    let plan = derive_phases(net);
    let layout = plan_layout(net, cfg)?;
    let steps = plan
        .steps
        .iter()
        .map(|&s| emit_step(net, &layout, cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    let entries: Vec<IBufferEntry> = steps.iter().map(IBufferEntry::from_step).collect();
    let image = pack_ibuffer(&entries, cfg.ibuffer_bytes)?;
    Ok(Compiled { plan, layout, steps, image })
}

fn mux_text(m: &Mux) -> String {
    let comp = |a: Src, b: Src| if a == Src::Unused { "-".to_string() } else { format!("{a}+{b}") };
    format!("p={} q={} f({},{},{},{})", comp(m.s, m.t), comp(m.u, m.v), m.a, m.b, m.c, m.d)
}

/// One row per step mirroring the PMAG and PE program tables.
pub fn dump_table(c: &Compiled) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<4} {:<28} {:<34} {:<34} {:<22} PE", "#", "step", "R1..R7", "mux", "comparators");
    for (k, st) in c.steps.iter().enumerate() {
        let p = &st.table[0];
        let bounds = p.bounds.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        let cmp = p
            .cmp
            .iter()
            .flatten()
            .map(|c| format!("{}∈[{},{})", c.sig, c.lo, c.hi))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            s,
            "{:<4} {:<28} {:<34} {:<34} {:<22} {}",
            k,
            st.step.to_string(),
            format!("({bounds})"),
            mux_text(&p.mux),
            if cmp.is_empty() { "-".into() } else { cmp },
            st.pe
        );
    }
    let _ = writeln!(s, "entries {} bytes {} of {}", c.image.entries, c.image.bytes.len(), c.image.capacity);
    s
}

/// Text report of per-vault footprints and the conv-UP lowering blow-up.
pub fn footprint_report(net: &NetworkSpec, lay: &LayoutPlan) -> String {
    let mut s = String::new();
    for (v, b) in lay.vault_bytes.iter().enumerate() {
        let _ = writeln!(s, "vault {v:>2}: {b} B");
    }
    for (i, l) in net.layers.iter().enumerate() {
        if let LayerKind::Conv(c) = l.kind {
            let (x, xm) = lowered_footprint(&c);
            let _ = writeln!(s, "L{i} conv-UP lowered input {xm} vs {x} elements per sample (x{:.1})", xm as f64 / x as f64);
        }
    }
    s
}

#[cfg(test)]
mod tests;
