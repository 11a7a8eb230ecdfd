//! Per-PE work plans: operand traffic and lane work of each step, cut into
//! buffer-sized tiles.

use crate::compiler::{BitMode, LayoutPlan, Placement, PmagProgram, Src as Sig, StepGeom, StepPrograms, TensorId};
use crate::netspec::{NetworkSpec, OpClass};
use crate::partition::ranges;

use super::MachineConfig;

/// Where a buffer's operand comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feed {
    None,
    /// Already resident in the buffer.
    Resident,
    /// The PE's own vault channel.
    Local,
    /// Bus transfer item (broadcast or point-to-point) from the common vault.
    Item(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sink {
    Local,
    Merge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    /// MACs (or comparisons) per active lane.
    pub work: u64,
    pub lanes: u32,
    pub feed: [(Feed, u64); 2],
    /// Output-buffer bytes claimed when the tile starts.
    pub reserve: u64,
    /// Bytes written back when the tile ends.
    pub emit: u64,
    pub sink: Sink,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BusItem {
    pub bytes: u64,
    pub pes: Vec<usize>,
    /// Buffer (0 or 1) and tile index per participant.
    pub targets: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tiles: Vec<Vec<Tile>>,
    pub items: Vec<BusItem>,
    /// Operations per lane per cycle.
    pub per_cycle: u64,
}

impl TilePlan {
    pub fn ops(&self) -> u64 {
        self.tiles.iter().flatten().map(|t| t.work * t.lanes as u64).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Src {
    None,
    Local,
    Broadcast,
    Bus,
    /// Loaded once by broadcast, then resident.
    Preload,
}

/// Work with a single accumulator lifetime: the output is claimed at the
/// first tile and written at the last unless `streamed`.
#[derive(Clone, Copy, Debug)]
struct Group {
    work: u64,
    lanes: u32,
    in1: (Src, u64),
    in2: (Src, u64),
    out: u64,
    sink: Sink,
    streamed: bool,
}

struct Builder {
    half: u64,
    out_half: u64,
    items: Vec<(u64, u64, usize, usize, usize, u64)>,
    tiles: Vec<Vec<Tile>>,
    bcast: Vec<u64>,
}

impl Builder {
    fn push(&mut self, pe: usize, g: Group) {
        let splits = |b: (Src, u64)| match b.0 {
            Src::Local | Src::Broadcast | Src::Bus => b.1.div_ceil(self.half),
            _ => 1,
        };
        let mut n = splits(g.in1).max(splits(g.in2)).max(1);
        if g.streamed {
            n = n.max(g.out.div_ceil(self.out_half));
        }
        if g.work > 0 {
            n = n.min(g.work);
        }
        let share = |total: u64, i: u64| total * (i + 1) / n - total * i / n;
        for i in 0..n {
            let mut feed = [(Feed::None, 0), (Feed::None, 0)];
            for (b, (src, bytes)) in [g.in1, g.in2].into_iter().enumerate() {
                let t = self.tiles[pe].len();
                feed[b] = match src {
                    Src::None => (Feed::None, 0),
                    Src::Local => (Feed::Local, share(bytes, i)),
                    Src::Broadcast | Src::Bus => {
                        let part = share(bytes, i);
                        let ord = if src == Src::Broadcast {
                            self.bcast[pe] += 1;
                            self.bcast[pe] - 1
                        } else {
                            t as u64
                        };
                        let kind = u64::from(src == Src::Bus);
                        self.items.push((ord, kind, pe, b, t, part));
                        (Feed::Item(usize::MAX), part)
                    }
                    Src::Preload if i == 0 => {
                        self.bcast[pe] += 1;
                        self.items.push((self.bcast[pe] - 1, 0, pe, b, t, bytes));
                        (Feed::Item(usize::MAX), bytes)
                    }
                    Src::Preload => (Feed::Resident, 0),
                };
            }
            let (reserve, emit) = if g.streamed {
                (share(g.out, i), share(g.out, i))
            } else {
                (if i == 0 { g.out } else { 0 }, if i + 1 == n { g.out } else { 0 })
            };
            self.tiles[pe].push(Tile { work: share(g.work, i), lanes: g.lanes, feed, reserve, emit, sink: g.sink });
        }
    }

    /// Resolve bus items: broadcasts with the same ordinal share one transfer.
    fn finish(mut self, per_cycle: u64) -> TilePlan {
        self.items.sort_by_key(|&(ord, kind, pe, ..)| (ord, kind, if kind == 1 { pe } else { 0 }));
        let mut items: Vec<BusItem> = Vec::new();
        let mut last: Option<(u64, u64)> = None;
        for (ord, kind, pe, b, t, bytes) in self.items {
            let join = kind == 0 && last == Some((ord, 0));
            if !join {
                items.push(BusItem { bytes: 0, pes: Vec::new(), targets: Vec::new() });
            }
            let it = items.last_mut().unwrap();
            it.bytes = it.bytes.max(bytes);
            it.pes.push(pe);
            it.targets.push((b, t));
            let id = items.len() - 1;
            self.tiles[pe][t].feed[b].0 = Feed::Item(id);
            last = Some((ord, kind));
        }
        TilePlan { tiles: self.tiles, items, per_cycle }
    }
}

fn eb(lay: &LayoutPlan, t: TensorId) -> u64 {
    lay.tensors[t].elem_bytes as u64
}

fn sink_of(lay: &LayoutPlan, t: TensorId) -> Sink {
    match lay.tensors[t].placement {
        Placement::Common | Placement::Replicated => Sink::Merge,
        _ => Sink::Local,
    }
}

fn lane_groups(n: usize, k: usize) -> Vec<u32> {
    (0..n.div_ceil(k)).map(|g| (n - g * k).min(k) as u32).collect()
}

/// Output rows spanned by the pixel range `r` of a `w`-wide plane.
fn rows_spanned(r: &std::ops::Range<usize>, w: usize) -> u64 {
    if r.is_empty() {
        0
    } else {
        ((r.end - 1) / w - r.start / w + 1) as u64
    }
}

/// Per-PE MAC count of the compiled segments.
fn pe_ops(st: &StepPrograms) -> Vec<u64> {
    let mut v = vec![0u64; st.work.iter().map(|w| w.pe + 1).max().unwrap_or(0)];
    for w in &st.work {
        v[w.pe] = w.segments.iter().map(|s| s.a.points() * s.out.lanes.max(1) as u64).sum();
    }
    v
}

pub fn plan(net: &NetworkSpec, lay: &LayoutPlan, cfg: &MachineConfig, st: &StepPrograms) -> TilePlan {
    let pes = lay.pes;
    let k = cfg.lanes;
    let half = (cfg.input_buffer_bytes / 2) as u64;
    let whole = cfg.input_buffer_bytes as u64;
    let ob = cfg.output_buffer_bytes as u64;
    let per_cycle = if st.pe.mode == BitMode::B16 { 2 } else { 1 };
    let mut b = Builder { half, out_half: (ob / 2).max(1), items: Vec::new(), tiles: vec![Vec::new(); pes], bcast: vec![0; pes] };
    let i = st.step.layer;
    let lt = &lay.layers[i];
    let m = lay.batch as u64;
    let ops = pe_ops(st);
    let acc_bytes = 4u64;

    match (st.step.op, st.geom) {
        (OpClass::ConvFF | OpClass::ConvBP, StepGeom::Conv { spec: c, .. }) => {
            let ff = st.step.op == OpClass::ConvFF;
            let (kk, d, no) = ((c.kh * c.kw) as u64, c.in_d, c.kernels);
            // Lanes run over output channels; the reduction covers the other side.
            let (outs, red, plane_w, plane) = if ff {
                (no, d as u64, c.out_w(), c.out_h() * c.out_w())
            } else {
                (d, no as u64, c.in_w, c.in_h * c.in_w)
            };
            let (src_t, dst_t) = if ff {
                (lay.conv_input(net, i), lt.y.unwrap().tensor)
            } else {
                (lt.dz.unwrap().tensor, lay.dx_dest(net, i).0.tensor)
            };
            let wb = eb(lay, lt.w[0]);
            let (xb, ybytes) = (eb(lay, src_t), eb(lay, dst_t));
            let src_w = if ff { c.padded_w() } else { c.out_w() + c.kw - 1 };
            for (e, r) in ranges(plane, pes).into_iter().enumerate() {
                if r.is_empty() {
                    continue;
                }
                let pix = r.len() as u64;
                let strip = (rows_spanned(&r, plane_w) + c.kh as u64 - 1) * src_w as u64 * red * m * xb;
                for lanes in lane_groups(outs, k) {
                    let kbytes = red * kk * lanes as u64 * wb;
                    let kern = if kbytes <= whole { (Src::Preload, kbytes) } else { (Src::Broadcast, kbytes) };
                    b.push(
                        e,
                        Group {
                            work: pix * m * red * kk,
                            lanes,
                            in1: (Src::Local, strip),
                            in2: kern,
                            out: pix * m * lanes as u64 * ybytes,
                            sink: sink_of(lay, dst_t),
                            streamed: true,
                        },
                    );
                }
            }
        }
        (OpClass::ConvUP, StepGeom::Conv { spec: c, .. }) => {
            let xt = lay.conv_input(net, i);
            let dz = lt.dz.unwrap().tensor;
            let per_lane = (c.in_d * c.kh * c.kw) as u64;
            for (e, r) in ranges(c.out_h() * c.out_w(), pes).into_iter().enumerate() {
                if r.is_empty() {
                    continue;
                }
                let pix = r.len() as u64;
                for lanes in lane_groups(c.kernels, k) {
                    let chunk = (ob / (lanes as u64 * acc_bytes)).max(1);
                    let mut left = per_lane;
                    while left > 0 {
                        let a = left.min(chunk);
                        left -= a;
                        b.push(
                            e,
                            Group {
                                work: pix * m * a,
                                lanes,
                                in1: (Src::Local, pix * m * a * eb(lay, xt)),
                                in2: (Src::Local, pix * m * lanes as u64 * eb(lay, dz)),
                                out: a * lanes as u64 * acc_bytes,
                                sink: Sink::Merge,
                                streamed: false,
                            },
                        );
                    }
                }
            }
        }
        (OpClass::FCFF, StepGeom::Matrix { .. }) => {
            let x = lay.x_view(net, i).tensor;
            let out_t = st.work.iter().flat_map(|w| w.segments.first()).next().map(|s| s.out.tensor);
            for (e, r) in rows_of(st, pes).into_iter().enumerate() {
                if r == 0 || ops[e] == 0 {
                    continue;
                }
                let cols = ops[e] / (r * m);
                let wt = st.work[e].segments[0].a.tensor;
                for lanes in lane_groups(r as usize, k) {
                    b.push(
                        e,
                        Group {
                            work: cols * m,
                            lanes,
                            in1: (Src::Broadcast, cols * m * eb(lay, x)),
                            in2: (Src::Local, lanes as u64 * cols * eb(lay, wt)),
                            out: lanes as u64 * m * out_t.map_or(4, |t| eb(lay, t)),
                            sink: out_t.map_or(Sink::Merge, |t| sink_of(lay, t)),
                            streamed: false,
                        },
                    );
                }
            }
        }
        (OpClass::FCBP, StepGeom::Matrix { .. }) => {
            for (e, r) in rows_of(st, pes).into_iter().enumerate() {
                if r == 0 || ops[e] == 0 {
                    continue;
                }
                let seg = &st.work[e].segments[0];
                let (wt, dzt) = (seg.a.tensor, seg.b.as_ref().unwrap().tensor);
                let j = ops[e] / (r * m);
                let dz_bytes = r * m * eb(lay, dzt);
                let mut first = true;
                for lanes in lane_groups(j as usize, k) {
                    let in1 = if dz_bytes <= half {
                        if first { (Src::Local, dz_bytes) } else { (Src::None, 0) }
                    } else {
                        (Src::Local, dz_bytes)
                    };
                    first = false;
                    b.push(
                        e,
                        Group {
                            work: r * m,
                            lanes,
                            in1,
                            in2: (Src::Local, r * lanes as u64 * eb(lay, wt)),
                            out: lanes as u64 * m * acc_bytes,
                            sink: Sink::Merge,
                            streamed: false,
                        },
                    );
                }
            }
        }
        (OpClass::FCUP, StepGeom::Matrix { m: mc, .. }) => {
            let mc = mc as u64;
            for (e, r) in rows_of(st, pes).into_iter().enumerate() {
                if r == 0 || ops[e] == 0 {
                    continue;
                }
                let seg = &st.work[e].segments[0];
                let (dzt, xt, dwt) = (seg.a.tensor, seg.b.as_ref().unwrap().tensor, seg.out.tensor);
                let cols = ops[e] / (r * mc);
                for lanes in lane_groups(cols as usize, k) {
                    let chunk = (ob / (lanes as u64 * acc_bytes)).max(1);
                    let mut left = r;
                    while left > 0 {
                        let a = left.min(chunk);
                        left -= a;
                        b.push(
                            e,
                            Group {
                                work: a * mc,
                                lanes,
                                in1: (Src::Local, a * mc * eb(lay, dzt)),
                                in2: (Src::Broadcast, lanes as u64 * mc * eb(lay, xt)),
                                out: a * lanes as u64 * eb(lay, dwt),
                                sink: sink_of(lay, dwt),
                                streamed: false,
                            },
                        );
                    }
                }
            }
        }
        (OpClass::Pool | OpClass::PoolBP, StepGeom::Pool { d, h, w, r, .. }) => {
            let (ho, wo) = (h / r, w / r);
            let rr = (r * r) as u64;
            let y = lt.y.unwrap().tensor;
            let ids = lt.ids.unwrap();
            let x = lay.x_view(net, i).tensor;
            for (e, pr) in ranges(ho * wo, pes).into_iter().enumerate() {
                if pr.is_empty() {
                    continue;
                }
                let cells = pr.len() as u64 * d as u64 * m;
                let steps = cells.div_ceil(k as u64);
                let lanes = cells.min(k as u64) as u32;
                // Lane work is rounded up so lanes x work covers every cell.
                let work = steps * rr;
                let g = if st.step.op == OpClass::Pool {
                    Group {
                        work,
                        lanes,
                        in1: (Src::Local, cells * rr * eb(lay, x)),
                        in2: (Src::None, 0),
                        out: cells * (eb(lay, y) + eb(lay, ids)),
                        sink: Sink::Local,
                        streamed: true,
                    }
                } else {
                    let dz = lt.dz.unwrap().tensor;
                    Group {
                        work,
                        lanes,
                        in1: (Src::Local, cells * (eb(lay, dz) + eb(lay, ids))),
                        in2: (Src::None, 0),
                        out: cells * rr * eb(lay, lay.dx_dest(net, i).0.tensor),
                        sink: Sink::Local,
                        streamed: true,
                    }
                };
                b.push(e, g);
            }
        }
        (OpClass::Merge | OpClass::Partition | OpClass::AddPad | OpClass::RemovePad, _) => {
            for w in &st.work {
                let (mut local_in, mut remote_in, mut local_out, mut remote_out) = (0u64, 0u64, 0u64, 0u64);
                for s in &w.segments {
                    let elems = touched(&s.out) * s.out.lanes.max(1) as u64;
                    let (ib, obb) = (eb(lay, s.a.tensor), eb(lay, s.out.tensor));
                    let reads_local = !matches!(lay.tensors[s.a.tensor].placement, Placement::Common | Placement::Replicated);
                    let writes_local = s.out.physical.is_some()
                        || !matches!(lay.tensors[s.out.tensor].placement, Placement::Common | Placement::Replicated);
                    if reads_local {
                        local_in += elems * ib;
                    } else {
                        remote_in += elems * ib;
                    }
                    if writes_local {
                        local_out += elems * obb;
                    } else {
                        remote_out += elems * obb;
                    }
                }
                let src = Src::Bus;
                let moved = local_out + remote_out;
                let in1 = if remote_in > 0 { (src, remote_in) } else { (Src::Local, local_in) };
                b.push(
                    w.pe,
                    Group {
                        work: 0,
                        lanes: 0,
                        in1,
                        in2: (Src::None, 0),
                        out: moved,
                        sink: if remote_out > 0 { Sink::Merge } else { Sink::Local },
                        streamed: true,
                    },
                );
            }
        }
        (_, StepGeom::Stream { elems }) => {
            // Element-wise unit beside the common vault, modelled on PE 0's port.
            let bytes = elems as u64 * 4;
            let reads = if st.step.op == OpClass::LossEval { 2 } else { 3 };
            b.push(
                0,
                Group {
                    work: (elems as u64).div_ceil(k as u64),
                    lanes: 0,
                    in1: (Src::Bus, bytes * reads),
                    in2: (Src::None, 0),
                    out: bytes,
                    sink: Sink::Merge,
                    streamed: true,
                },
            );
        }
        (op, g) => unreachable!("{op} with geometry {g:?}"),
    }
    b.finish(per_cycle)
}

/// Events of `p` surviving its comparator window (counter signals only).
fn touched(p: &PmagProgram) -> u64 {
    let mut n = p.points();
    for c in p.cmp.iter().flatten() {
        if let Sig::R(k) = c.sig {
            let k = (k - 1) as usize;
            let (lo, hi) = (p.origins[k] as i64, p.origins[k] as i64 + p.bounds[k] as i64);
            let inside = (c.hi.min(hi) - c.lo.max(lo)).max(0) as u64;
            n = n / p.bounds[k].max(1) as u64 * inside;
        }
    }
    n
}

/// Rows (FC) held by each PE.
fn rows_of(st: &StepPrograms, pes: usize) -> Vec<u64> {
    let rows = match st.geom {
        StepGeom::Matrix { rows, cols, .. } => {
            if st.step.op == OpClass::FCBP {
                cols
            } else {
                rows
            }
        }
        _ => 0,
    };
    ranges(rows, pes).into_iter().map(|r| r.len() as u64).collect()
}
