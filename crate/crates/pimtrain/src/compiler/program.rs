//! PMAG and PE program representations.

use std::fmt;

use crate::fxnum::LutFn;
use crate::netspec::{OpClass, StepSpec};

use super::layout::TensorId;

/// Signal feeding a mux input of the address generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Src {
    /// Counter r1..r7 (stored 1-based).
    R(u8),
    /// p = s + t (or s*radius + t when scaled).
    P,
    /// q = u + v (or u*radius + v when scaled).
    Q,
    Zero,
    /// The program's radius constant.
    Radius,
    /// Running count of emitted (non-gated) events.
    Seq,
    Unused,
}

impl Src {
    pub fn code(self) -> u8 {
        match self {
            Src::R(i) => i - 1,
            Src::P => 7,
            Src::Q => 8,
            Src::Zero => 9,
            Src::Radius => 10,
            Src::Seq => 11,
            Src::Unused => 12,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0..=6 => Src::R(c + 1),
            7 => Src::P,
            8 => Src::Q,
            9 => Src::Zero,
            10 => Src::Radius,
            11 => Src::Seq,
            12 => Src::Unused,
            _ => return None,
        })
    }
}

impl fmt::Display for Src {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Src::R(i) => write!(f, "r{i}"),
            Src::P => f.write_str("p"),
            Src::Q => f.write_str("q"),
            Src::Zero => f.write_str("0"),
            Src::Radius => f.write_str("r"),
            Src::Seq => f.write_str("seq"),
            Src::Unused => f.write_str("-"),
        }
    }
}

pub const R1: Src = Src::R(1);
pub const R2: Src = Src::R(2);
pub const R3: Src = Src::R(3);
pub const R4: Src = Src::R(4);
pub const R5: Src = Src::R(5);
pub const R6: Src = Src::R(6);
pub const R7: Src = Src::R(7);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mux {
    pub s: Src,
    pub t: Src,
    pub u: Src,
    pub v: Src,
    pub a: Src,
    pub b: Src,
    pub c: Src,
    pub d: Src,
}

impl Mux {
    /// Address-only selection (no composite signals).
    pub fn abcd(a: Src, b: Src, c: Src, d: Src) -> Self {
        Self { s: Src::Unused, t: Src::Unused, u: Src::Unused, v: Src::Unused, a, b, c, d }
    }

    pub fn all(&self) -> [Src; 8] {
        [self.s, self.t, self.u, self.v, self.a, self.b, self.c, self.d]
    }
}

/// Passes an event when `lo <= signal < hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Comparator {
    pub sig: Src,
    pub lo: i64,
    pub hi: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gating {
    /// Out-of-window events are dropped.
    Skip,
    /// Out-of-window events carry a zero operand without touching memory.
    ZeroFill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dir {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BusRole {
    Local,
    BroadcastSource,
    MergeSink,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmagProgram {
    pub op: OpClass,
    pub tensor: TensorId,
    pub bounds: [u32; 7],
    /// Counter start values; the table programs start every counter at zero.
    pub origins: [u32; 7],
    pub mux: Mux,
    pub radius: u32,
    /// Pooling windows: p = s*radius + t, q = u*radius + v.
    pub scaled: bool,
    /// Strides of f inputs a, b, c, d.
    pub strides: [i64; 4],
    pub base: i64,
    /// SIMD lanes per counter point and the address step between them.
    pub lanes: u32,
    pub lane_stride: i64,
    /// Addresses are valid in [0, extent).
    pub extent: u64,
    /// Addresses are offsets inside the tensor's region of this vault
    /// rather than logical element indices.
    pub physical: Option<usize>,
    pub seq_origin: u64,
    pub cmp: [Option<Comparator>; 2],
    pub gating: Gating,
    pub lut: Option<LutFn>,
    pub dir: Dir,
    pub bus: BusRole,
    /// 16 or 32; selects the END-MARK width.
    pub word_bits: u8,
}

impl PmagProgram {
    pub fn new(op: OpClass, tensor: TensorId, bounds: [u32; 7], mux: Mux, strides: [i64; 4]) -> Self {
        Self {
            op,
            tensor,
            bounds,
            origins: [0; 7],
            mux,
            radius: 0,
            scaled: false,
            strides,
            base: 0,
            lanes: 1,
            lane_stride: 0,
            extent: u64::MAX,
            physical: None,
            seq_origin: 0,
            cmp: [None, None],
            gating: Gating::Skip,
            lut: None,
            dir: Dir::Read,
            bus: BusRole::Local,
            word_bits: 32,
        }
    }

    pub fn points(&self) -> u64 {
        self.bounds.iter().map(|&b| b as u64).product()
    }

    pub fn with_base(mut self, base: i64) -> Self {
        self.base = base;
        self
    }

    pub fn write(mut self) -> Self {
        self.dir = Dir::Write;
        self
    }

    pub fn lanes(mut self, lanes: u32, stride: i64) -> Self {
        self.lanes = lanes;
        self.lane_stride = stride;
        self
    }

    pub fn extent(mut self, extent: usize) -> Self {
        self.extent = extent as u64;
        self
    }

    pub fn lut(mut self, f: Option<LutFn>) -> Self {
        self.lut = f;
        self
    }

    pub fn gated(mut self, cmp: [Option<Comparator>; 2], gating: Gating) -> Self {
        self.cmp = cmp;
        self.gating = gating;
        self
    }

    pub fn radius(mut self, r: u32, scaled: bool) -> Self {
        self.radius = r;
        self.scaled = scaled;
        self
    }

    pub fn same_nest(&self, other: &Self) -> bool {
        self.bounds == other.bounds && self.origins == other.origins && self.lanes == other.lanes
    }

    pub fn bus(mut self, role: BusRole) -> Self {
        self.bus = role;
        self
    }

    /// Restrict counter `i` (1-based) to [origin, origin + bound).
    pub fn window(mut self, i: usize, origin: u32, bound: u32) -> Self {
        self.origins[i - 1] = origin;
        self.bounds[i - 1] = bound;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeOp {
    Mac,
    Max,
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BitMode {
    B16,
    B32,
    B32Sr,
}

impl fmt::Display for BitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BitMode::B16 => "16",
            BitMode::B32 => "32",
            BitMode::B32Sr => "32+SR",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PeProgram {
    pub op: PeOp,
    pub mode: BitMode,
    pub cnt2: [u32; 2],
    pub cnt1: u32,
}

impl PeProgram {
    pub fn idle() -> Self {
        Self { op: PeOp::Idle, mode: BitMode::B32, cnt2: [1, 1], cnt1: 1 }
    }
}

impl fmt::Display for PeProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            PeOp::Idle => f.write_str("idle"),
            op => {
                let cnt2 = if self.cnt2[1] == 1 {
                    format!("{}", self.cnt2[0])
                } else {
                    format!("({}, {})", self.cnt2[0], self.cnt2[1])
                };
                write!(f, "{:?} {}-bit CNT2={} CNT1={}", op, self.mode, cnt2, self.cnt1)
            }
        }
    }
}

/// Zipped programs sharing one counter nest: each point reads A and B and
/// updates the accumulator addressed by `out`, once per SIMD lane.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub a: PmagProgram,
    pub b: Option<PmagProgram>,
    pub out: PmagProgram,
    /// Reads the activation whose derivative (its `lut`) gates the finalized output.
    pub gate: Option<PmagProgram>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeWork {
    pub pe: usize,
    pub segments: Vec<Segment>,
}

/// Everything the machine needs to run one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPrograms {
    pub step: StepSpec,
    /// Canonical programs matching the table rows (packed into the iBuffer).
    pub table: Vec<PmagProgram>,
    pub pe: PeProgram,
    pub work: Vec<PeWork>,
    /// Partial results of all PEs are merge-accumulated at the common vault.
    pub merge: bool,
    pub divisor: u32,
    pub geom: super::StepGeom,
}

impl StepPrograms {
    pub fn macs(&self) -> u64 {
        self.work
            .iter()
            .flat_map(|w| &w.segments)
            .map(|s| s.a.points() * s.a.lanes as u64)
            .sum()
    }
}
