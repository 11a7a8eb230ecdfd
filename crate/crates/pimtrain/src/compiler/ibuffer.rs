//! Packed 22-byte instruction entries (18 B PMAG + 4 B PE), see docs/ibuffer.md.

use crate::fxnum::LutFn;
use crate::netspec::OpClass;

use super::program::{BitMode, Gating, Mux, PeOp, PeProgram, Src, StepPrograms};
use super::CompileError;

pub const ENTRY_BYTES: usize = 22;
pub const PMAG_BYTES: usize = 18;
const BOUND_BITS: u32 = 13;
const NO_CMP: u64 = 15;

/// Everything an entry records about one step.
#[derive(Clone, Debug, PartialEq)]
pub struct IBufferEntry {
    pub op: OpClass,
    pub bounds: [u32; 7],
    pub mux: Mux,
    pub cmp: [Option<Src>; 2],
    pub radius: u32,
    /// Base nonlinearity; derivative use is implied by the phase.
    pub lut: Option<LutFn>,
    pub scaled: bool,
    pub zero_fill: bool,
    pub pe: PeProgram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IBufferImage {
    pub bytes: Vec<u8>,
    pub entries: usize,
    pub capacity: usize,
}

fn base_lut(f: LutFn) -> LutFn {
    match f {
        LutFn::ReluGrad => LutFn::Relu,
        LutFn::TanhGrad => LutFn::Tanh,
        LutFn::SigmoidGrad => LutFn::Sigmoid,
        other => other,
    }
}

const LUTS: [LutFn; 6] = [LutFn::Relu, LutFn::Tanh, LutFn::Sigmoid, LutFn::Identity, LutFn::Exp, LutFn::Log];

impl IBufferEntry {
    pub fn from_step(s: &StepPrograms) -> Self {
        let p = &s.table[0];
        let lut = s.table.iter().find_map(|p| p.lut).map(base_lut);
        Self {
            op: s.step.op,
            bounds: p.bounds,
            mux: p.mux,
            cmp: p.cmp.map(|c| c.map(|c| c.sig)),
            radius: p.radius,
            lut,
            scaled: p.scaled,
            zero_fill: p.cmp.iter().any(|c| c.is_some()) && p.gating == Gating::ZeroFill,
            pe: s.pe,
        }
    }
}

struct Bits {
    out: Vec<u8>,
    pos: usize,
}

impl Bits {
    fn put(&mut self, field: &'static str, v: u64, bits: u32) -> Result<(), CompileError> {
        if v >> bits != 0 {
            return Err(CompileError::Field { field, value: v, bits });
        }
        for k in 0..bits as usize {
            if v >> k & 1 == 1 {
                self.out[(self.pos + k) / 8] |= 1 << ((self.pos + k) % 8);
            }
        }
        self.pos += bits as usize;
        Ok(())
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn get(&mut self, bits: u32) -> u64 {
        let mut v = 0u64;
        for k in 0..bits as usize {
            let p = self.pos + k;
            v |= ((self.b[p / 8] >> (p % 8) & 1) as u64) << k;
        }
        self.pos += bits as usize;
        v
    }
}

pub fn pack_entry(e: &IBufferEntry) -> Result<[u8; ENTRY_BYTES], CompileError> {
    let mut w = Bits { out: vec![0; ENTRY_BYTES], pos: 0 };
    w.put("op", e.op.code() as u64, 4)?;
    for &b in &e.bounds {
        if b == 0 {
            return Err(CompileError::Field { field: "bound", value: 0, bits: BOUND_BITS });
        }
        w.put("bound", b as u64, BOUND_BITS)?;
    }
    for s in e.mux.all() {
        w.put("mux", s.code() as u64, 4)?;
    }
    for c in e.cmp {
        w.put("comparator", c.map_or(NO_CMP, |s| s.code() as u64), 4)?;
    }
    w.put("radius", e.radius as u64, 4)?;
    let lut = match e.lut {
        None => 0,
        Some(f) => LUTS.iter().position(|&l| l == f).map(|i| i as u64 + 1).unwrap_or(0),
    };
    w.put("lut", lut, 3)?;
    w.put("flags", e.scaled as u64 | (e.zero_fill as u64) << 1, 2)?;
    debug_assert_eq!(w.pos, PMAG_BYTES * 8);
    let (op, mode) = match (e.pe.op, e.pe.mode) {
        (PeOp::Idle, _) => (0, 3),
        (op, m) => (
            (op == PeOp::Max) as u64,
            match m {
                BitMode::B16 => 0,
                BitMode::B32 => 1,
                BitMode::B32Sr => 2,
            },
        ),
    };
    w.put("pe op", op, 1)?;
    w.put("pe mode", mode, 2)?;
    w.put("CNT2", e.pe.cnt2[0] as u64, 10)?;
    w.put("CNT2", e.pe.cnt2[1] as u64, 10)?;
    w.put("CNT1", e.pe.cnt1 as u64, 9)?;
    Ok(w.out.try_into().expect("22 bytes"))
}

pub fn unpack_entry(b: &[u8]) -> Result<IBufferEntry, CompileError> {
    if b.len() != ENTRY_BYTES {
        return Err(CompileError::Internal(format!("entry of {} bytes", b.len())));
    }
    let bad = |what: &str| CompileError::Internal(format!("invalid {what} field"));
    let mut r = Reader { b, pos: 0 };
    let op = OpClass::from_code(r.get(4) as u8).ok_or_else(|| bad("op"))?;
    let mut bounds = [0u32; 7];
    for v in &mut bounds {
        *v = r.get(BOUND_BITS) as u32;
    }
    let mut m = [Src::Unused; 8];
    for s in &mut m {
        *s = Src::from_code(r.get(4) as u8).ok_or_else(|| bad("mux"))?;
    }
    let mut cmp = [None; 2];
    for c in &mut cmp {
        let v = r.get(4);
        *c = if v == NO_CMP { None } else { Some(Src::from_code(v as u8).ok_or_else(|| bad("comparator"))?) };
    }
    let radius = r.get(4) as u32;
    let lut = match r.get(3) {
        0 => None,
        k => Some(*LUTS.get(k as usize - 1).ok_or_else(|| bad("lut"))?),
    };
    let flags = r.get(2);
    let op_bit = r.get(1);
    let mode = r.get(2);
    let cnt2 = [r.get(10) as u32, r.get(10) as u32];
    let cnt1 = r.get(9) as u32;
    let pe = if mode == 3 {
        PeProgram { op: PeOp::Idle, mode: BitMode::B32, cnt2, cnt1 }
    } else {
        let mode = [BitMode::B16, BitMode::B32, BitMode::B32Sr][mode as usize];
        PeProgram { op: if op_bit == 1 { PeOp::Max } else { PeOp::Mac }, mode, cnt2, cnt1 }
    };
    Ok(IBufferEntry {
        op,
        bounds,
        mux: Mux { s: m[0], t: m[1], u: m[2], v: m[3], a: m[4], b: m[5], c: m[6], d: m[7] },
        cmp,
        radius,
        lut,
        scaled: flags & 1 == 1,
        zero_fill: flags & 2 == 2,
        pe,
    })
}

pub fn pack_ibuffer(entries: &[IBufferEntry], capacity: usize) -> Result<IBufferImage, CompileError> {
    if entries.is_empty() {
        return Err(CompileError::Internal("no programs to pack".into()));
    }
    let needed = entries.len() * ENTRY_BYTES;
    if needed > capacity {
        return Err(CompileError::IBuffer { needed, capacity, entries: entries.len() });
    }
    let mut bytes = Vec::with_capacity(needed);
    for e in entries {
        bytes.extend_from_slice(&pack_entry(e)?);
    }
    Ok(IBufferImage { bytes, entries: entries.len(), capacity })
}

pub fn unpack_ibuffer(bytes: &[u8]) -> Result<Vec<IBufferEntry>, CompileError> {
    if bytes.len() % ENTRY_BYTES != 0 {
        return Err(CompileError::Internal(format!("image length {} is not a multiple of {ENTRY_BYTES}", bytes.len())));
    }
    bytes.chunks(ENTRY_BYTES).map(unpack_entry).collect()
}
