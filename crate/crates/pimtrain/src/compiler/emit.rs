//! Step programs: table-literal PMAG programs, per-PE instances and PE programs.

use std::ops::Range;

use crate::fxnum::{LutFn, NumericMode};
use crate::machine::MachineConfig;
use crate::netspec::{CellKind, ConvSpec, LayerKind, NetworkSpec, OpClass, Phase, StepSpec, SubOp};
use crate::partition::ranges;

use super::layout::{LayoutPlan, Placement, TensorId, View};
use super::program::*;
use super::{CompileError, StepGeom};

pub fn bit_mode(m: NumericMode) -> BitMode {
    match m {
        NumericMode::Fixed16 => BitMode::B16,
        NumericMode::Fixed32 | NumericMode::Float => BitMode::B32,
        _ => BitMode::B32Sr,
    }
}

fn word_bits(m: NumericMode) -> u8 {
    match m {
        NumericMode::Fixed16 => 16,
        _ => 32,
    }
}

/// Rectangle of a plane: rows [y, y+h), columns [x, x+w).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub h: usize,
    pub x: usize,
    pub w: usize,
}

/// A contiguous pixel range of a `width`-wide plane as at most three rectangles.
pub fn rects(r: Range<usize>, width: usize) -> Vec<Rect> {
    if r.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = (r.start, r.end);
    let (mut y, x0) = (lo / width, lo % width);
    if y == (hi - 1) / width {
        return vec![Rect { y, h: 1, x: x0, w: hi - lo }];
    }
    let mut out = Vec::new();
    if x0 > 0 {
        out.push(Rect { y, h: 1, x: x0, w: width - x0 });
        y += 1;
    }
    let last = hi / width;
    if last > y {
        out.push(Rect { y, h: last - y, x: 0, w: width });
    }
    if hi % width > 0 {
        out.push(Rect { y: last, h: 1, x: 0, w: hi % width });
    }
    out
}

/// `range` cut into blocks of `size`: (start, block, count) for the full
/// blocks and then the remainder.
fn chunks(range: Range<usize>, size: usize) -> Vec<(usize, usize, usize)> {
    let len = range.len();
    let size = size.max(1);
    let mut out = Vec::new();
    if len / size > 0 {
        out.push((range.start, size, len / size));
    }
    if len % size > 0 {
        out.push((range.start + len / size * size, len % size, 1));
    }
    out
}

/// Row block P and column block L of a matrix operand so that one L x P
/// block fills at most half an input buffer.
pub fn blocking(rows: usize, cols: usize, elem_bytes: usize, cfg: &MachineConfig) -> (usize, usize) {
    let l = cols.clamp(1, 4 * cfg.lanes);
    let fit = (cfg.input_buffer_bytes / 2 / (l * elem_bytes)).max(1);
    (rows.clamp(1, fit.min(1023)), l)
}

fn bytes(m: NumericMode) -> usize {
    if m == NumericMode::Fixed16 {
        2
    } else {
        4
    }
}

struct ColGroup {
    view: View,
    width: usize,
    offset: usize,
}

struct OutGroup {
    dest: View,
    gate: Option<(LutFn, View)>,
    width: usize,
    offset: usize,
}

struct Ctx<'a> {
    net: &'a NetworkSpec,
    lay: &'a LayoutPlan,
    cfg: &'a MachineConfig,
    step: StepSpec,
    m: usize,
}

fn shift(v: View, rows: usize) -> View {
    View { base: v.base + rows * v.row, ..v }
}

impl Ctx<'_> {
    fn ext(&self, t: TensorId) -> usize {
        self.lay.tensors[t].len
    }

    fn mode(&self) -> NumericMode {
        match self.step.phase {
            Phase::FF | Phase::Prep => self.net.train.ff,
            Phase::BP => self.net.train.bp,
            Phase::UP => self.net.train.up,
        }
    }

    fn prog(&self, t: TensorId, bounds: [u32; 7], mux: Mux, strides: [i64; 4]) -> PmagProgram {
        let mut p = PmagProgram::new(self.step.op, t, bounds, mux, strides).extent(self.ext(t));
        p.word_bits = word_bits(self.mode());
        p
    }

    fn pes(&self) -> usize {
        self.lay.pes
    }

    fn gate_prog(&self, out: &PmagProgram, gate: Option<(LutFn, View)>, dest: View) -> Option<PmagProgram> {
        gate.map(|(f, v)| {
            let mut g = out.clone();
            g.tensor = v.tensor;
            g.extent = self.ext(v.tensor) as u64;
            g.dir = Dir::Read;
            g.bus = BusRole::Local;
            g.lut = Some(f);
            // Same (j, n) position in the gate view.
            g.base = out.base - dest.base as i64 + v.base as i64;
            if v.row != dest.row {
                g.strides = out.strides.map(|s| if s % dest.row as i64 == 0 { s / dest.row as i64 * v.row as i64 } else { s });
                g.base = v.base as i64 + (out.base - dest.base as i64) / dest.row as i64 * v.row as i64;
            }
            g
        })
    }
}

fn conv_of(net: &NetworkSpec, i: usize) -> ConvSpec {
    match net.layers[i].kind {
        LayerKind::Conv(c) => c,
        _ => unreachable!("conv step on a non-conv layer"),
    }
}

fn vol(net: &NetworkSpec, s: crate::netspec::Shape) -> (usize, usize, usize) {
    let _ = net;
    match s {
        crate::netspec::Shape::Volume { d, h, w } => (d, h, w),
        crate::netspec::Shape::Vector(n) => (n, 1, 1),
    }
}

fn i64s(v: [usize; 4]) -> [i64; 4] {
    v.map(|x| x as i64)
}

fn u32s(v: [usize; 7]) -> [u32; 7] {
    v.map(|x| x as u32)
}

struct Emitted {
    table: Vec<PmagProgram>,
    pe: PeProgram,
    work: Vec<PeWork>,
    merge: bool,
    divisor: u32,
    geom: StepGeom,
}

impl Emitted {
    fn new(table: Vec<PmagProgram>, pe: PeProgram, work: Vec<PeWork>, geom: StepGeom) -> Self {
        Self { table, pe, work, merge: false, divisor: 1, geom }
    }
}

fn conv_ff(cx: &Ctx, i: usize) -> Emitted {
    let (c, m) = (conv_of(cx.net, i), cx.m);
    let (hp, wp, ho, wo) = (c.padded_h(), c.padded_w(), c.out_h(), c.out_w());
    let (d, k, no) = (c.in_d, c.kh, c.kernels);
    let xt = cx.lay.conv_input(cx.net, i);
    let wt = cx.lay.layers[i].w[0];
    let yv = cx.lay.layers[i].y.unwrap();
    let bounds = u32s([no, ho, wo, m, d, k, k]);
    let x = cx
        .prog(xt, bounds, Mux { s: R2, t: R6, u: R3, v: R7, a: R4, b: Src::Q, c: Src::P, d: R5 }, i64s([1, m, wp * m, hp * wp * m]));
    let w = cx.prog(wt, bounds, Mux::abcd(R1, R5, R6, R7), i64s([d * k * k, k * k, k, 1])).bus(BusRole::BroadcastSource);
    let y = cx
        .prog(yv.tensor, bounds, Mux::abcd(R4, R3, R2, R1), i64s([1, m, wo * m, ho * wo * m]))
        .write()
        .lut(cx.net.activation_after(i).map(|a| a.lut()));
    let work = (0..cx.pes())
        .map(|e| PeWork {
            pe: e,
            segments: rects(ranges(ho * wo, cx.pes())[e].clone(), wo)
                .into_iter()
                .map(|r| {
                    let win = |p: &PmagProgram| p.clone().window(2, r.y as u32, r.h as u32).window(3, r.x as u32, r.w as u32);
                    Segment { a: win(&w), b: Some(win(&x)), out: win(&y), gate: None }
                })
                .collect(),
        })
        .collect();
    let pe = PeProgram { op: PeOp::Mac, mode: bit_mode(cx.mode()), cnt2: [k as u32, k as u32], cnt1: (k * k) as u32 };
    Emitted::new(vec![x, w, y], pe, work, StepGeom::Conv { spec: c, n: m })
}

fn conv_bp(cx: &Ctx, i: usize) -> Emitted {
    let (c, m) = (conv_of(cx.net, i), cx.m);
    let (hi, wi, ho, wo, r) = (c.in_h, c.in_w, c.out_h(), c.out_w(), c.pad);
    let (d, k, no) = (c.in_d, c.kh, c.kernels);
    let dz = cx.lay.layers[i].dz.unwrap();
    let wt = cx.lay.layers[i].w[0];
    let (dest, gate) = cx.lay.dx_dest(cx.net, i);
    let bounds = u32s([d, hi, wi, m, no, k, k]);
    let cmp = [
        Some(Comparator { sig: Src::P, lo: r as i64, hi: (r + ho) as i64 }),
        Some(Comparator { sig: Src::Q, lo: r as i64, hi: (r + wo) as i64 }),
    ];
    let dy = cx
        .prog(dz.tensor, bounds, Mux { s: R2, t: R6, u: R3, v: R7, a: R4, b: Src::Q, c: Src::P, d: R5 }, i64s([1, m, wo * m, ho * wo * m]))
        .with_base(-((r * wo * m + r * m) as i64))
        .radius(r as u32, false)
        .gated(cmp, Gating::ZeroFill);
    // Transposed kernel: CNT2 swept in reverse.
    let w = cx
        .prog(wt, bounds, Mux::abcd(R5, R1, R6, R7), [(d * k * k) as i64, (k * k) as i64, -(k as i64), -1])
        .with_base((k * k - 1) as i64)
        .bus(BusRole::BroadcastSource);
    let out = cx.prog(dest.tensor, bounds, Mux::abcd(R4, R3, R2, R1), i64s([1, m, wi * m, hi * wi * m])).write();
    let g = cx.gate_prog(&out, gate, dest);
    let work = (0..cx.pes())
        .map(|e| PeWork {
            pe: e,
            segments: rects(ranges(hi * wi, cx.pes())[e].clone(), wi)
                .into_iter()
                .map(|rc| {
                    let win = |p: &PmagProgram| p.clone().window(2, rc.y as u32, rc.h as u32).window(3, rc.x as u32, rc.w as u32);
                    Segment { a: win(&dy), b: Some(win(&w)), out: win(&out), gate: g.as_ref().map(win) }
                })
                .collect(),
        })
        .collect();
    let pe = PeProgram { op: PeOp::Mac, mode: bit_mode(cx.mode()), cnt2: [k as u32, k as u32], cnt1: (k * k) as u32 };
    Emitted::new(vec![dy, w, out], pe, work, StepGeom::Conv { spec: c, n: m })
}

fn conv_up(cx: &Ctx, i: usize) -> Emitted {
    let (c, m) = (conv_of(cx.net, i), cx.m);
    let (hp, wp, ho, wo) = (c.padded_h(), c.padded_w(), c.out_h(), c.out_w());
    let (d, k, no) = (c.in_d, c.kh, c.kernels);
    let xt = cx.lay.conv_input(cx.net, i);
    let dz = cx.lay.layers[i].dz.unwrap();
    let dw = cx.lay.layers[i].dw[0];
    let bounds = u32s([1, m, ho, wo, d, k, k]);
    let lanes = no as u32;
    let x = cx
        .prog(xt, bounds, Mux { s: R3, t: R6, u: R4, v: R7, a: Src::Q, b: Src::P, c: R5, d: R2 }, i64s([m, wp * m, hp * wp * m, 1]))
        .lanes(lanes, 0);
    let dy = cx
        .prog(dz.tensor, bounds, Mux::abcd(R2, R3, R4, Src::Zero), i64s([1, wo * m, m, 0]))
        .lanes(lanes, (ho * wo * m) as i64);
    let out = cx
        .prog(dw, bounds, Mux::abcd(R5, R6, R7, Src::Zero), i64s([k * k, k, 1, 0]))
        .lanes(lanes, (d * k * k) as i64)
        .write()
        .bus(BusRole::MergeSink);
    let work = (0..cx.pes())
        .map(|e| {
            let rs = rects(ranges(ho * wo, cx.pes())[e].clone(), wo);
            let mut segments = Vec::new();
            for n in 0..m {
                for rc in &rs {
                    let win = |p: &PmagProgram| {
                        p.clone().window(2, n as u32, 1).window(3, rc.y as u32, rc.h as u32).window(4, rc.x as u32, rc.w as u32)
                    };
                    segments.push(Segment { a: win(&dy), b: Some(win(&x)), out: win(&out), gate: None });
                }
            }
            PeWork { pe: e, segments }
        })
        .collect();
    let (p, l) = blocking(no, d * k * k, bytes(cx.mode()), cx.cfg);
    let pe = PeProgram { op: PeOp::Mac, mode: bit_mode(cx.mode()), cnt2: [p as u32, l as u32], cnt1: l as u32 };
    let mut e = Emitted::new(vec![x, dy, out], pe, work, StepGeom::Conv { spec: c, n: m });
    e.merge = true;
    e.divisor = m as u32;
    e
}

/// Rows [lo, hi) of W times the column groups, P x L blocked.
#[allow(clippy::too_many_arguments)]
fn fc_ff_segments(
    cx: &Ctx,
    w: TensorId,
    cols: usize,
    groups: &[ColGroup],
    out: View,
    act: Option<LutFn>,
    rows: Range<usize>,
    (p, l): (usize, usize),
) -> Vec<Segment> {
    let m = cx.m;
    let mut segs = Vec::new();
    for (r0, pp, nb) in chunks(rows, p) {
        for g in groups {
            for (c0, ll, nc) in chunks(0..g.width, l) {
                let b = u32s([nb, nc, pp, ll, m, 1, 1]);
                let xv = g.view;
                let x = cx
                    .prog(xv.tensor, b, Mux::abcd(R4, R2, R5, Src::Zero), i64s([xv.row, ll * xv.row, 1, 0]))
                    .with_base((xv.base + c0 * xv.row) as i64)
                    .bus(BusRole::BroadcastSource);
                let wp = cx
                    .prog(w, b, Mux::abcd(R4, R3, R2, R1), i64s([1, cols, ll, pp * cols]))
                    .with_base((r0 * cols + g.offset + c0) as i64);
                let y = cx
                    .prog(out.tensor, b, Mux::abcd(R5, R3, R1, Src::Zero), i64s([1, out.row, pp * out.row, 0]))
                    .with_base((out.base + r0 * out.row) as i64)
                    .write()
                    .bus(BusRole::MergeSink)
                    .lut(act);
                segs.push(Segment { a: wp, b: Some(x), out: y, gate: None });
            }
        }
    }
    segs
}

/// Reduction rows [lo, hi) of W^T dZ into the output groups.
fn fc_bp_segments(
    cx: &Ctx,
    w: TensorId,
    cols: usize,
    dz: View,
    groups: &[OutGroup],
    rows: Range<usize>,
    (p, l): (usize, usize),
) -> Vec<Segment> {
    let m = cx.m;
    let mut segs = Vec::new();
    for g in groups {
        for (j0, pp, nb) in chunks(0..g.width, p) {
            for (i0, ll, nc) in chunks(rows.clone(), l) {
                let b = u32s([nb, nc, pp, ll, m, 1, 1]);
                let d = cx
                    .prog(dz.tensor, b, Mux::abcd(R4, R2, R5, Src::Zero), i64s([dz.row, ll * dz.row, 1, 0]))
                    .with_base((dz.base + i0 * dz.row) as i64);
                let wp = cx
                    .prog(w, b, Mux::abcd(R4, R3, R2, R1), i64s([cols, 1, ll * cols, pp]))
                    .with_base((i0 * cols + g.offset + j0) as i64);
                let o = cx
                    .prog(g.dest.tensor, b, Mux::abcd(R5, R3, R1, Src::Zero), i64s([1, g.dest.row, pp * g.dest.row, 0]))
                    .with_base((g.dest.base + j0 * g.dest.row) as i64)
                    .write()
                    .bus(BusRole::MergeSink);
                let gate = cx.gate_prog(&o, g.gate, g.dest);
                segs.push(Segment { a: wp, b: Some(d), out: o, gate });
            }
        }
    }
    segs
}

/// dW rows of PE `e` (block size h) from dZ columns and the column groups of X.
#[allow(clippy::too_many_arguments)]
fn fc_up_segments(
    cx: &Ctx,
    dw: TensorId,
    cols: usize,
    dz: View,
    mcols: usize,
    groups: &[ColGroup],
    e: usize,
    rows: Range<usize>,
    h: usize,
) -> Vec<Segment> {
    let nmac = cx.cfg.lanes;
    let mut segs = Vec::new();
    if rows.is_empty() {
        return segs;
    }
    for g in groups {
        for (j0, ln, nb) in chunks(0..g.width, nmac) {
            let b = u32s([1, nb, mcols, rows.len(), 1, 1, 1]);
            let xv = g.view;
            let lanes = ln as u32;
            let a = cx
                .prog(dz.tensor, b, Mux::abcd(R4, R3, R2, R1), i64s([dz.row, 1, 0, h * dz.row]))
                .with_base(dz.base as i64)
                .lanes(lanes, 0)
                .window(1, e as u32, 1);
            let x = cx
                .prog(xv.tensor, b, Mux::abcd(R4, R3, R2, R1), i64s([0, 1, ln * xv.row, 0]))
                .with_base((xv.base + j0 * xv.row) as i64)
                .lanes(lanes, xv.row as i64)
                .bus(BusRole::BroadcastSource)
                .window(1, e as u32, 1);
            let o = cx
                .prog(dw, b, Mux::abcd(R4, R3, R2, R1), i64s([cols, 0, ln, h * cols]))
                .with_base((g.offset + j0) as i64)
                .lanes(lanes, 1)
                .write()
                .window(1, e as u32, 1);
            segs.push(Segment { a, b: Some(x), out: o, gate: None });
        }
    }
    segs
}

/// Table-literal FC-FF/BP programs for a rows x cols matrix operand.
fn fc_table(cx: &Ctx, w: TensorId, rows: usize, cols: usize, x: View, out: View, (p, l): (usize, usize), bp: bool) -> Vec<PmagProgram> {
    let m = cx.m;
    let b = u32s([rows.div_ceil(p), cols.div_ceil(l), p, l, m, 1, 1]);
    let c = cx
        .prog(x.tensor, b, Mux::abcd(R4, R2, R5, Src::Zero), i64s([x.row, l * x.row, 1, 0]))
        .with_base(x.base as i64)
        .bus(BusRole::BroadcastSource);
    let wstr = if bp { i64s([rows, 1, l * rows, p]) } else { i64s([1, cols, l, p * cols]) };
    let i = cx.prog(w, b, Mux::abcd(R4, R3, R2, R1), wstr);
    let o = cx
        .prog(out.tensor, b, Mux::abcd(R5, R3, R1, Src::Zero), i64s([1, out.row, p * out.row, 0]))
        .with_base(out.base as i64)
        .write()
        .bus(BusRole::MergeSink);
    vec![c, i, o]
}

fn recurrent(net: &NetworkSpec, i: usize) -> (usize, usize, usize, CellKind) {
    match net.layers[i].kind {
        LayerKind::Recurrent { input, hidden, steps, cell } => (input, hidden, steps, cell),
        _ => unreachable!("recurrent step on a non-recurrent layer"),
    }
}

fn fc_ff(cx: &Ctx, i: usize) -> Emitted {
    let (lay, net, m) = (cx.lay, cx.net, cx.m);
    let lt = &lay.layers[i];
    let x = lay.x_view(net, i);
    let (w, rows, cols, groups, out, act) = match net.layers[i].kind {
        LayerKind::Fc { input, output } => (
            lt.w[0],
            output,
            input,
            vec![ColGroup { view: x, width: input, offset: 0 }],
            lt.y.unwrap(),
            net.activation_after(i).map(|a| a.lut()),
        ),
        LayerKind::Recurrent { .. } => {
            let (ni, nh, steps, _) = recurrent(net, i);
            let ct = lt.cell.as_ref().unwrap();
            let t = cx.step.time.expect("recurrent steps are time-indexed");
            let (tn, tn1) = (steps * m, (steps + 1) * m);
            let block = |tensor: TensorId, t: usize, row: usize| View { tensor, base: t * m, row };
            let hs_t = block(ct.hs, t, tn1);
            let xg = ColGroup { view: shift(x, t * ni), width: ni, offset: 0 };
            let (g, hpart, out, act) = match cx.step.sub {
                SubOp::Cell => (0, hs_t, block(ct.hs, t + 1, tn1), LutFn::Tanh),
                SubOp::GateZ => (0, hs_t, block(ct.z.unwrap(), t, tn), LutFn::Sigmoid),
                SubOp::GateR => (1, hs_t, block(ct.r.unwrap(), t, tn), LutFn::Sigmoid),
                SubOp::GateN => (2, block(ct.rh.unwrap(), t, tn), block(ct.n.unwrap(), t, tn), LutFn::Tanh),
                other => unreachable!("{other:?} is not a gate step"),
            };
            (lt.w[g], nh, ni + nh, vec![xg, ColGroup { view: hpart, width: nh, offset: ni }], out, Some(act))
        }
        _ => unreachable!("FC-FF on a non-matrix layer"),
    };
    let rows_pe = rows.div_ceil(cx.pes());
    let pl = blocking(rows_pe, cols, bytes(cx.mode()), cx.cfg);
    let work = (0..cx.pes())
        .map(|e| PeWork { pe: e, segments: fc_ff_segments(cx, w, cols, &groups, out, act, ranges(rows, cx.pes())[e].clone(), pl) })
        .collect();
    let mut table = fc_table(cx, w, rows, cols, groups[0].view, out, pl, false);
    table[2].lut = act;
    let pe = PeProgram { op: PeOp::Mac, mode: bit_mode(cx.mode()), cnt2: [pl.0 as u32, pl.1 as u32], cnt1: pl.1 as u32 };
    Emitted::new(table, pe, work, StepGeom::Matrix { rows, cols, m })
}

fn fc_bp(cx: &Ctx, i: usize) -> Emitted {
    let (lay, net, m) = (cx.lay, cx.net, cx.m);
    let lt = &lay.layers[i];
    let (dest, gate) = lay.dx_dest(net, i);
    let (w, rows, cols, dz, groups) = match net.layers[i].kind {
        LayerKind::Fc { input, output } => {
            (lt.w[0], output, input, lt.dz.unwrap(), vec![OutGroup { dest, gate, width: input, offset: 0 }])
        }
        LayerKind::Recurrent { .. } => {
            let (ni, nh, steps, _) = recurrent(net, i);
            let ct = lt.cell.as_ref().unwrap();
            let t = cx.step.time.expect("recurrent steps are time-indexed");
            let (tn, tn1) = (steps * m, (steps + 1) * m);
            let block = |tensor: TensorId, t: usize, row: usize| View { tensor, base: t * m, row };
            match cx.step.sub {
                SubOp::Cell => {
                    let mut groups = vec![OutGroup {
                        dest: shift(dest, t * ni),
                        gate: gate.map(|(f, v)| (f, shift(v, t * ni))),
                        width: ni,
                        offset: 0,
                    }];
                    if t > 0 {
                        groups.push(OutGroup {
                            dest: block(ct.dz, t - 1, tn),
                            gate: Some((LutFn::Tanh, block(ct.hs, t, tn1))),
                            width: nh,
                            offset: ni,
                        });
                    }
                    (lt.w[0], nh, ni + nh, block(ct.dz, t, tn), groups)
                }
                sub => {
                    let (g, src) = match sub {
                        SubOp::GateZ => (0, ct.dz),
                        SubOp::GateR => (1, ct.dr.unwrap()),
                        SubOp::GateN => (2, ct.dn.unwrap()),
                        other => unreachable!("{other:?} is not a gate step"),
                    };
                    let groups = vec![OutGroup { dest: View::whole(ct.du[g], m), gate: None, width: ni + nh, offset: 0 }];
                    (lt.w[g], nh, ni + nh, block(src, t, tn), groups)
                }
            }
        }
        _ => unreachable!("FC-BP on a non-matrix layer"),
    };
    let pl = blocking(cols, rows.div_ceil(cx.pes()), bytes(cx.mode()), cx.cfg);
    let work = (0..cx.pes())
        .map(|e| PeWork { pe: e, segments: fc_bp_segments(cx, w, cols, dz, &groups, ranges(rows, cx.pes())[e].clone(), pl) })
        .collect();
    let table = fc_table(cx, w, cols, rows, dz, groups[0].dest, pl, true);
    let pe = PeProgram { op: PeOp::Mac, mode: bit_mode(cx.mode()), cnt2: [pl.0 as u32, pl.1 as u32], cnt1: pl.1 as u32 };
    let mut e = Emitted::new(table, pe, work, StepGeom::Matrix { rows: cols, cols: rows, m });
    e.merge = true;
    e
}

fn fc_up(cx: &Ctx, i: usize) -> Emitted {
    let (lay, net, m) = (cx.lay, cx.net, cx.m);
    let lt = &lay.layers[i];
    let x = lay.x_view(net, i);
    let pes = cx.pes();
    // (dW tensor, rows, cols, [(dZ view, columns, X groups)])
    type Part = (View, usize, Vec<ColGroup>);
    let (rows, cols, mats): (usize, usize, Vec<(TensorId, Vec<Part>)>) = match net.layers[i].kind {
        LayerKind::Fc { input, output } => {
            (output, input, vec![(lt.dw[0], vec![(lt.dz.unwrap(), m, vec![ColGroup { view: x, width: input, offset: 0 }])])])
        }
        LayerKind::Recurrent { .. } => {
            let (ni, nh, steps, cell) = recurrent(net, i);
            let ct = lt.cell.as_ref().unwrap();
            let (tn, tn1) = (steps * m, (steps + 1) * m);
            let block = |tensor: TensorId, t: usize, row: usize| View { tensor, base: t * m, row };
            let parts = |dz: TensorId, hsrc: Option<TensorId>| -> Vec<Part> {
                (0..steps)
                    .map(|t| {
                        let hv = match hsrc {
                            Some(rh) => block(rh, t, tn),
                            None => block(ct.hs, t, tn1),
                        };
                        (
                            block(dz, t, tn),
                            m,
                            vec![
                                ColGroup { view: shift(x, t * ni), width: ni, offset: 0 },
                                ColGroup { view: hv, width: nh, offset: ni },
                            ],
                        )
                    })
                    .collect()
            };
            let mats = match cell {
                CellKind::Elman => vec![(lt.dw[0], parts(ct.dz, None))],
                CellKind::Gru => vec![
                    (lt.dw[0], parts(ct.dz, None)),
                    (lt.dw[1], parts(ct.dr.unwrap(), None)),
                    (lt.dw[2], parts(ct.dn.unwrap(), ct.rh)),
                ],
            };
            (nh, ni + nh, mats)
        }
        _ => unreachable!("FC-UP on a non-matrix layer"),
    };
    let h = rows.div_ceil(pes);
    let work = (0..pes)
        .map(|e| {
            let r = ranges(rows, pes)[e].clone();
            let mut segments = Vec::new();
            for (dw, parts) in &mats {
                for (dz, mc, groups) in parts {
                    segments.extend(fc_up_segments(cx, *dw, cols, *dz, *mc, groups, e, r.clone(), h));
                }
            }
            PeWork { pe: e, segments }
        })
        .collect();
    let nmac = cx.cfg.lanes;
    let mcols = mats[0].1.iter().map(|p| p.1).sum::<usize>();
    let b = |r4: usize| u32s([rows.div_ceil(h), cols.div_ceil(nmac), mcols, r4, 1, 1, 1]);
    let dz0 = mats[0].1[0].0;
    let iv = cx.prog(dz0.tensor, b(h), Mux::abcd(R4, R3, R2, R1), i64s([dz0.row, 1, 0, h * dz0.row]));
    let xv = mats[0].1[0].2[0].view;
    let cv = cx
        .prog(xv.tensor, b(nmac), Mux::abcd(R4, R3, R2, R1), i64s([xv.row, 1, nmac * xv.row, 0]))
        .with_base(xv.base as i64)
        .bus(BusRole::BroadcastSource);
    let pe = PeProgram { op: PeOp::Mac, mode: bit_mode(cx.mode()), cnt2: [h as u32, 1], cnt1: 1 };
    let mut e = Emitted::new(vec![iv, cv], pe, work, StepGeom::Matrix { rows, cols, m: mcols });
    e.divisor = m as u32;
    e
}

fn pool(cx: &Ctx, i: usize, bp: bool) -> Emitted {
    let (net, lay, m) = (cx.net, cx.lay, cx.m);
    let r = match net.layers[i].kind {
        LayerKind::MaxPool { radius } => radius,
        _ => unreachable!("pool step on a non-pool layer"),
    };
    let (d, h, w) = vol(net, net.layers[i].input);
    let (ho, wo) = (h / r, w / r);
    let bounds = u32s([d, ho, wo, m, r, r, 1]);
    let win_mux = Mux { s: R2, t: R5, u: R3, v: R6, a: R4, b: Src::Q, c: Src::P, d: R1 };
    let in_str = i64s([1, m, w * m, h * w * m]);
    let out_str = i64s([1, m, wo * m, ho * wo * m]);
    let plain = Mux::abcd(R4, R3, R2, R1);
    let lt = &lay.layers[i];
    let (a, b, out, gate) = if !bp {
        let x = cx.prog(lay.x_view(net, i).tensor, bounds, win_mux, in_str).radius(r as u32, true);
        let ids = cx.prog(lt.ids.unwrap(), bounds, plain, out_str).write();
        let y = cx.prog(lt.y.unwrap().tensor, bounds, plain, out_str).write();
        (x, Some(ids), y, None)
    } else {
        let dy = cx.prog(lt.dz.unwrap().tensor, bounds, plain, out_str);
        let ids = cx.prog(lt.ids.unwrap(), bounds, plain, out_str);
        let (dest, gate) = lay.dx_dest(net, i);
        let dx = cx.prog(dest.tensor, bounds, win_mux, in_str).radius(r as u32, true).write();
        let g = cx.gate_prog(&dx, gate, dest);
        (dy, Some(ids), dx, g)
    };
    let work = (0..cx.pes())
        .map(|e| PeWork {
            pe: e,
            segments: rects(ranges(ho * wo, cx.pes())[e].clone(), wo)
                .into_iter()
                .map(|rc| {
                    let win = |p: &PmagProgram| p.clone().window(2, rc.y as u32, rc.h as u32).window(3, rc.x as u32, rc.w as u32);
                    Segment { a: win(&a), b: b.as_ref().map(win), out: win(&out), gate: gate.as_ref().map(win) }
                })
                .collect(),
        })
        .collect();
    let pe = PeProgram { op: PeOp::Max, mode: bit_mode(cx.mode()), cnt2: [r as u32, r as u32], cnt1: (r * r) as u32 };
    let mut table = vec![a, out];
    table.extend(b);
    Emitted::new(table, pe, work, StepGeom::Pool { d, h, w, r, n: m })
}

fn plane_of(p: &Placement) -> (usize, usize, usize) {
    match *p {
        Placement::PixelSplit { d, h, w, .. } => (d, h, w),
        _ => unreachable!("pixel-split tensor expected"),
    }
}

/// Copy of a volume between placements with identical logical geometry.
fn merge(cx: &Ctx, src: TensorId, dst: TensorId) -> Emitted {
    let m = cx.m;
    let (d, h, w) = plane_of(&cx.lay.tensors[src].placement);
    let bounds = u32s([d, h, w, 1, 1, 1, 1]);
    let str = i64s([m, w * m, h * w * m, 0]);
    let mux = Mux::abcd(R3, R2, R1, Src::Zero);
    let read = cx.prog(src, bounds, mux, str).lanes(m as u32, 1);
    let write = cx.prog(dst, bounds, mux, str).lanes(m as u32, 1).write().bus(BusRole::MergeSink);
    let work: Vec<PeWork> = (0..cx.pes())
        .map(|e| PeWork {
            pe: e,
            segments: rects(ranges(h * w, cx.pes())[e].clone(), w)
                .into_iter()
                .map(|rc| {
                    let win = |p: &PmagProgram| p.clone().window(2, rc.y as u32, rc.h as u32).window(3, rc.x as u32, rc.w as u32);
                    Segment { a: win(&read), b: None, out: win(&write), gate: None }
                })
                .collect(),
        })
        .collect();
    let table = first_segment(&work, |s| vec![s.out.clone(), s.a.clone()]).unwrap_or_else(|| vec![write, read]);
    Emitted::new(table, PeProgram::idle(), work, StepGeom::Stream { elems: d * h * w * m })
}

fn first_segment(work: &[PeWork], f: impl Fn(&Segment) -> Vec<PmagProgram>) -> Option<Vec<PmagProgram>> {
    work.iter().flat_map(|w| w.segments.first()).next().map(f)
}

/// Scatter of a common volume into per-PE windows with sequential destination
/// addressing. `windows[e]` lists the PE's rectangles in its local order.
pub fn partition_programs(
    op: OpClass,
    src: TensorId,
    dst: TensorId,
    (d, h, w, m): (usize, usize, usize, usize),
    windows: &[Vec<Rect>],
    extents: (usize, &[usize]),
    word: u8,
) -> Vec<PeWork> {
    let bounds = u32s([1, h, w, 1, 1, 1, 1]);
    windows
        .iter()
        .enumerate()
        .map(|(e, rs)| {
            let mut seq = 0u64;
            let mut segments = Vec::new();
            for dd in 0..d {
                for rc in rs {
                    let cmp = [
                        Some(Comparator { sig: R2, lo: rc.y as i64, hi: (rc.y + rc.h) as i64 }),
                        Some(Comparator { sig: R3, lo: rc.x as i64, hi: (rc.x + rc.w) as i64 }),
                    ];
                    let mut read = PmagProgram::new(op, src, bounds, Mux::abcd(R3, R2, R1, Src::Zero), i64s([m, w * m, h * w * m, 0]))
                        .lanes(m as u32, 1)
                        .extent(extents.0)
                        .window(1, dd as u32, 1)
                        .gated(cmp, Gating::Skip)
                        .bus(BusRole::BroadcastSource);
                    read.word_bits = word;
                    let mut write = PmagProgram::new(op, dst, bounds, Mux::abcd(Src::Zero, Src::Zero, Src::Zero, Src::Seq), [0, 0, 0, m as i64])
                        .lanes(m as u32, 1)
                        .extent(extents.1[e])
                        .window(1, dd as u32, 1)
                        .gated(cmp, Gating::Skip)
                        .write();
                    write.word_bits = word;
                    write.physical = Some(e);
                    write.seq_origin = seq;
                    seq += (rc.h * rc.w) as u64;
                    segments.push(Segment { a: read, b: None, out: write, gate: None });
                }
            }
            PeWork { pe: e, segments }
        })
        .collect()
}

/// Elements of tensor `t` held by each PE vault.
fn local_extents(lay: &LayoutPlan, t: TensorId) -> Vec<usize> {
    (0..lay.pes)
        .map(|v| {
            let next = (t + 1 < lay.tensors.len()).then(|| lay.bases[t + 1][v]).unwrap_or(lay.vault_elems[v]);
            next - lay.bases[t][v]
        })
        .collect()
}

fn partition(cx: &Ctx, src: TensorId, dst: TensorId) -> Emitted {
    let m = cx.m;
    let (d, h, w) = plane_of(&cx.lay.tensors[dst].placement);
    let windows: Vec<Vec<Rect>> = (0..cx.pes()).map(|e| rects(ranges(h * w, cx.pes())[e].clone(), w)).collect();
    let ext = local_extents(cx.lay, dst);
    let word = word_bits(cx.net.train.bp);
    let work = partition_programs(cx.step.op, src, dst, (d, h, w, m), &windows, (cx.ext(src), &ext), word);
    let table = first_segment(&work, |s| vec![s.out.clone(), s.a.clone()]).expect("nonempty partition");
    Emitted::new(table, PeProgram::idle(), work, StepGeom::Stream { elems: d * h * w * m })
}

/// Add-pad (`remove == false`) or remove-pad between an unpadded volume and
/// its padded strips.
pub fn pad_programs(
    op: OpClass,
    plain: TensorId,
    padded: TensorId,
    c: &ConvSpec,
    m: usize,
    strips: &[Range<usize>],
    extents: (usize, usize),
    word: u8,
) -> Vec<PeWork> {
    let (r, h, w, d) = (c.pad, c.in_h, c.in_w, c.in_d);
    let (hp, wp) = (c.padded_h(), c.padded_w());
    let cmp = [
        Some(Comparator { sig: R3, lo: r as i64, hi: (r + w) as i64 }),
        Some(Comparator { sig: R2, lo: r as i64, hi: (r + h) as i64 }),
    ];
    let bounds = u32s([d, hp, wp, 1, 1, 1, 1]);
    let lanes = m as u32;
    let pad_side = |p: PmagProgram| {
        let mut p = p.lanes(lanes, 1).extent(extents.1);
        p.word_bits = word;
        p
    };
    let plain_side = |p: PmagProgram| {
        let mut p = p.lanes(lanes, 1).extent(extents.0).radius(r as u32, false);
        p.word_bits = word;
        p
    };
    let padded_prog = pad_side(PmagProgram::new(op, padded, bounds, Mux::abcd(R3, R2, R1, Src::Zero), i64s([m, wp * m, hp * wp * m, 0])));
    // Shifted plain coordinates: p = col + r, q = row + r, base pulls back 2r.
    let shifted = Mux { s: R3, t: Src::Radius, u: R2, v: Src::Radius, a: Src::P, b: Src::Q, c: R1, d: Src::Zero };
    let plain_base = -((2 * r * m + 2 * r * w * m) as i64);
    strips
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(e, s)| {
            let win = |p: PmagProgram| p.window(2, s.start as u32, s.len() as u32);
            let seg = if op == OpClass::AddPad {
                let read = plain_side(PmagProgram::new(op, plain, bounds, shifted, i64s([m, w * m, h * w * m, 0])))
                    .with_base(plain_base)
                    .gated(cmp, Gating::ZeroFill);
                Segment { a: win(read), b: None, out: win(padded_prog.clone().write()), gate: None }
            } else {
                let read = padded_prog.clone().gated(cmp, Gating::Skip);
                let write = plain_side(PmagProgram::new(op, plain, bounds, Mux::abcd(R3, R2, R1, Src::Zero), i64s([m, w * m, h * w * m, 0])))
                    .with_base(-((r * m + r * w * m) as i64))
                    .gated(cmp, Gating::Skip)
                    .write();
                Segment { a: win(read), b: None, out: win(write), gate: None }
            };
            PeWork { pe: e, segments: vec![seg] }
        })
        .collect()
}

fn add_pad(cx: &Ctx, i: usize) -> Emitted {
    let c = conv_of(cx.net, i);
    let padded = cx.lay.layers[i].padded.expect("padded conv input");
    let src = cx.lay.x_view(cx.net, i).tensor;
    let strips = match &cx.lay.tensors[padded].placement {
        Placement::RowStrips { strips, .. } => strips.clone(),
        _ => unreachable!("padded input is strip-placed"),
    };
    let word = word_bits(cx.net.train.ff);
    let work = pad_programs(OpClass::AddPad, src, padded, &c, cx.m, &strips, (cx.ext(src), cx.ext(padded)), word);
    let table = first_segment(&work, |s| vec![s.a.clone(), s.out.clone()]).expect("nonempty pad");
    Emitted::new(table, PeProgram::idle(), work, StepGeom::Stream { elems: cx.ext(padded) })
}

/// Streams of element-wise steps (loss, GRU glue): one read and one write
/// program over (rows, samples); executed by the machine's element-wise unit.
fn stream_step(cx: &Ctx, i: usize) -> Emitted {
    let (lay, net, m) = (cx.lay, cx.net, cx.m);
    let two = |src: View, dst: View, rows: usize| -> Vec<PmagProgram> {
        let b = u32s([rows, m, 1, 1, 1, 1, 1]);
        let mux = Mux::abcd(R2, R1, Src::Zero, Src::Zero);
        vec![
            cx.prog(src.tensor, b, mux, i64s([1, src.row, 0, 0])).with_base(src.base as i64),
            cx.prog(dst.tensor, b, mux, i64s([1, dst.row, 0, 0])).with_base(dst.base as i64).write(),
        ]
    };
    let (table, elems) = if cx.step.op == OpClass::LossEval {
        let p = net.producer(i).expect("loss has a producer");
        let c = net.layers[p].output.len();
        (two(lay.layers[p].y.unwrap(), lay.layers[p].dz.unwrap(), c), c * m)
    } else {
        let (ni, nh, steps, _) = recurrent(net, i);
        let ct = lay.layers[i].cell.as_ref().unwrap();
        let t = cx.step.time.expect("recurrent steps are time-indexed");
        let (tn, tn1) = (steps * m, (steps + 1) * m);
        let block = |tensor: TensorId, t: usize, row: usize| View { tensor, base: t * m, row };
        let (src, dst) = match cx.step.sub {
            SubOp::ResetMul => (block(ct.r.unwrap(), t, tn), block(ct.rh.unwrap(), t, tn)),
            SubOp::Combine => (block(ct.n.unwrap(), t, tn), block(ct.hs, t + 1, tn1)),
            SubOp::CombineGrad => (block(ct.dh.unwrap(), t + 1, tn1), block(ct.dn.unwrap(), t, tn)),
            SubOp::ResetGrad => (shift(View::whole(ct.du[2], m), ni), block(ct.dr.unwrap(), t, tn)),
            SubOp::GradSum => (View::whole(ct.du[0], m), block(ct.dh.unwrap(), t, tn1)),
            other => unreachable!("{other:?} is not element-wise"),
        };
        (two(src, dst, nh), nh * m)
    };
    let pe = PeProgram { op: PeOp::Mac, mode: bit_mode(cx.mode()), cnt2: [1, 1], cnt1: 1 };
    Emitted::new(table, pe, Vec::new(), StepGeom::Stream { elems })
}

pub fn emit_step(net: &NetworkSpec, lay: &LayoutPlan, cfg: &MachineConfig, step: StepSpec) -> Result<StepPrograms, CompileError> {
    let cx = Ctx { net, lay, cfg, step, m: net.train.batch };
    let i = step.layer;
    let e = match step.op {
        OpClass::ConvFF => conv_ff(&cx, i),
        OpClass::ConvBP => conv_bp(&cx, i),
        OpClass::ConvUP => conv_up(&cx, i),
        OpClass::Pool => pool(&cx, i, false),
        OpClass::PoolBP => pool(&cx, i, true),
        OpClass::FCFF | OpClass::FCBP if step.sub.is_elementwise() => stream_step(&cx, i),
        OpClass::FCFF => fc_ff(&cx, i),
        OpClass::FCBP => fc_bp(&cx, i),
        OpClass::FCUP => fc_up(&cx, i),
        OpClass::LossEval => stream_step(&cx, i),
        OpClass::Merge => {
            let lt = &lay.layers[i];
            let (src, dst) = (lt.y.map(|v| v.tensor), lt.merged);
            match (src, dst) {
                (Some(s), Some(d)) => merge(&cx, s, d),
                _ => return Err(CompileError::Internal(format!("{step}: no merge target"))),
            }
        }
        OpClass::Partition => {
            let p = net.producer(i).ok_or_else(|| CompileError::Internal(format!("{step}: no producer")))?;
            let lt = &lay.layers[p];
            match (lt.dx_common, lt.dz) {
                (Some(s), Some(d)) => partition(&cx, s, d.tensor),
                _ => return Err(CompileError::Internal(format!("{step}: no partition source"))),
            }
        }
        OpClass::AddPad => add_pad(&cx, i),
        OpClass::RemovePad => return Err(CompileError::Internal(format!("{step}: remove-pad is not scheduled"))),
    };
    for w in &e.work {
        for s in &w.segments {
            let progs = [Some(&s.out), s.b.as_ref(), s.gate.as_ref()];
            if progs.iter().flatten().any(|p| !s.a.same_nest(p)) {
                return Err(CompileError::Internal(format!("{step}: segment programs disagree on the counter nest")));
            }
        }
    }
    Ok(StepPrograms { step, table: e.table, pe: e.pe, work: e.work, merge: e.merge, divisor: e.divisor, geom: e.geom })
}

/// Canonical PMAG programs of a step (table-row form, read and write sides).
pub fn emit_pmag(net: &NetworkSpec, lay: &LayoutPlan, cfg: &MachineConfig, step: StepSpec) -> Result<Vec<PmagProgram>, CompileError> {
    emit_step(net, lay, cfg, step).map(|s| s.table)
}

pub fn emit_pe(net: &NetworkSpec, lay: &LayoutPlan, cfg: &MachineConfig, step: StepSpec) -> Result<PeProgram, CompileError> {
    emit_step(net, lay, cfg, step).map(|s| s.pe)
}
