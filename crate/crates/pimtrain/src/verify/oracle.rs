//! Address-stream oracle: compiled PMAG programs against naive loop nests.

use std::collections::{BTreeMap, BTreeSet};

use crate::compiler::{pad_programs, Dir, LayoutPlan, PeWork, Placement, StepPrograms, TensorId};
use crate::machine::MachineConfig;
use crate::netspec::{LayerKind, NetworkSpec, OpClass};
use crate::partition::ranges;
use crate::pmag::{addr_stream, resolve, PmagError};

type Key = (usize, usize);

/// Read multiset and per-PE write sets, as (vault, physical address).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Streams {
    pub reads: BTreeMap<Key, u64>,
    pub writes: BTreeSet<(usize, Key)>,
}

impl Streams {
    fn read(&mut self, k: Key) {
        *self.reads.entry(k).or_default() += 1;
    }
}

/// Streams produced by running every program of every PE through the PMAG.
pub fn from_programs(lay: &LayoutPlan, work: &[PeWork]) -> Result<Streams, PmagError> {
    let mut s = Streams::default();
    for w in work {
        for seg in &w.segments {
            let progs = [Some(&seg.a), seg.b.as_ref(), Some(&seg.out), seg.gate.as_ref()];
            for p in progs.into_iter().flatten() {
                for ev in addr_stream(p, w.pe) {
                    let ev = ev?;
                    if ev.end || ev.zero {
                        continue;
                    }
                    let k = resolve(lay, p, ev.addr as i64, 0, w.pe)?;
                    match p.dir {
                        Dir::Read => s.read(k),
                        Dir::Write => {
                            s.writes.insert((w.pe, k));
                        }
                    }
                }
            }
        }
    }
    Ok(s)
}

struct Ref<'a> {
    lay: &'a LayoutPlan,
    s: Streams,
}

impl Ref<'_> {
    fn r(&mut self, t: TensorId, idx: usize, pe: usize) {
        let k = self.lay.locate(t, idx, Some(pe));
        self.s.read(k);
    }

    fn w(&mut self, t: TensorId, idx: usize, pe: usize) {
        let k = self.lay.locate(t, idx, Some(pe));
        self.s.writes.insert((pe, k));
    }
}

fn vol_idx((_, h, w): (usize, usize, usize), n: usize, d: usize, y: usize, x: usize, s: usize) -> usize {
    ((d * h + y) * w + x) * n + s
}

fn dims(lay: &LayoutPlan, t: TensorId) -> (usize, usize, usize) {
    match lay.tensors[t].placement {
        Placement::PixelSplit { d, h, w, .. } => (d, h, w),
        Placement::RowStrips { d, hp, wp, .. } => (d, hp, wp),
        _ => unreachable!("volume tensor expected"),
    }
}

/// Independent loop-nest reference for one compiled step.
pub fn reference(net: &NetworkSpec, lay: &LayoutPlan, st: &StepPrograms) -> Streams {
    let mut rf = Ref { lay, s: Streams::default() };
    let (pes, m, i) = (lay.pes, lay.batch, st.step.layer);
    let lt = &lay.layers[i];
    match st.step.op {
        OpClass::ConvFF | OpClass::ConvBP | OpClass::ConvUP => {
            let LayerKind::Conv(c) = net.layers[i].kind else { unreachable!() };
            let (k, r, d_in, no) = (c.kh, c.pad, c.in_d, c.kernels);
            let (ho, wo) = (c.out_h(), c.out_w());
            let xt = lay.conv_input(net, i);
            let xg = (d_in, c.padded_h(), c.padded_w());
            let og = (no, ho, wo);
            let wid = |o: usize, d: usize, kh: usize, kw: usize| ((o * d_in + d) * k + kh) * k + kw;
            let dz = lt.dz.unwrap().tensor;
            for e in 0..pes {
                let pix = ranges(ho * wo, pes)[e].clone();
                match st.step.op {
                    OpClass::ConvFF => {
                        for p in pix {
                            let (y, x) = (p / wo, p % wo);
                            for o in 0..no {
                                for n in 0..m {
                                    for d in 0..d_in {
                                        for kh in 0..k {
                                            for kw in 0..k {
                                                rf.r(xt, vol_idx(xg, m, d, y + kh, x + kw, n), e);
                                                rf.r(lt.w[0], wid(o, d, kh, kw), e);
                                            }
                                        }
                                    }
                                    rf.w(lt.y.unwrap().tensor, vol_idx(og, m, o, y, x, n), e);
                                }
                            }
                        }
                    }
                    OpClass::ConvBP => {
                        let (dest, gate) = lay.dx_dest(net, i);
                        let ig = (d_in, c.in_h, c.in_w);
                        for p in ranges(c.in_h * c.in_w, pes)[e].clone() {
                            let (y, x) = (p / c.in_w, p % c.in_w);
                            for d in 0..d_in {
                                for n in 0..m {
                                    for o in 0..no {
                                        for kh in 0..k {
                                            for kw in 0..k {
                                                let (py, px) = (y + kh, x + kw);
                                                if py >= r && py < r + ho && px >= r && px < r + wo {
                                                    rf.r(dz, vol_idx(og, m, o, py - r, px - r, n), e);
                                                }
                                                rf.r(lt.w[0], wid(o, d, k - 1 - kh, k - 1 - kw), e);
                                            }
                                        }
                                    }
                                    let at = vol_idx(ig, m, d, y, x, n);
                                    rf.w(dest.tensor, at, e);
                                    if let Some((_, g)) = gate {
                                        for _ in 0..no * k * k {
                                            rf.r(g.tensor, at, e);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    _ => {
                        for p in pix {
                            let (y, x) = (p / wo, p % wo);
                            for n in 0..m {
                                for d in 0..d_in {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            rf.r(xt, vol_idx(xg, m, d, y + kh, x + kw, n), e);
                                            for o in 0..no {
                                                rf.r(dz, vol_idx(og, m, o, y, x, n), e);
                                                rf.w(lt.dw[0], wid(o, d, kh, kw), e);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        OpClass::FCFF | OpClass::FCBP | OpClass::FCUP => {
            let LayerKind::Fc { input: cols, output: rows } = net.layers[i].kind else {
                unreachable!("oracle covers plain FC layers")
            };
            let x = lay.x_view(net, i);
            let dz = lt.dz.unwrap();
            let (dest, gate) = lay.dx_dest(net, i);
            let jblocks = cols.div_ceil(st.work.iter().flat_map(|w| &w.segments).map(|s| s.a.lanes as usize).max().unwrap_or(1));
            for e in 0..pes {
                for row in ranges(rows, pes)[e].clone() {
                    for n in 0..m {
                        for j in 0..cols {
                            match st.step.op {
                                OpClass::FCFF => {
                                    rf.r(lt.w[0], row * cols + j, e);
                                    rf.r(x.tensor, x.at(j, n), e);
                                    rf.w(lt.y.unwrap().tensor, row * m + n, e);
                                }
                                OpClass::FCBP => {
                                    rf.r(lt.w[0], row * cols + j, e);
                                    rf.r(dz.tensor, dz.at(row, n), e);
                                    rf.w(dest.tensor, dest.at(j, n), e);
                                    if let Some((_, g)) = gate {
                                        rf.r(g.tensor, g.at(j, n), e);
                                    }
                                }
                                _ => {
                                    rf.r(x.tensor, x.at(j, n), e);
                                    rf.w(lt.dw[0], row * cols + j, e);
                                }
                            }
                        }
                        if st.step.op == OpClass::FCUP {
                            for _ in 0..jblocks {
                                rf.r(dz.tensor, dz.at(row, n), e);
                            }
                        }
                    }
                }
            }
        }
        OpClass::Pool | OpClass::PoolBP => {
            let LayerKind::MaxPool { radius: r } = net.layers[i].kind else { unreachable!() };
            let ids = lt.ids.unwrap();
            let ig = dims(lay, lt.ids.unwrap());
            let (d_all, ho, wo) = ig;
            let (h, w) = (ho * r, wo * r);
            let xin = (d_all, h, w);
            let src = lay.x_view(net, i).tensor;
            let (dest, gate) = lay.dx_dest(net, i);
            for e in 0..pes {
                for p in ranges(ho * wo, pes)[e].clone() {
                    let (y, x) = (p / wo, p % wo);
                    for d in 0..d_all {
                        for n in 0..m {
                            let o = vol_idx(ig, m, d, y, x, n);
                            for ky in 0..r {
                                for kx in 0..r {
                                    let at = vol_idx(xin, m, d, y * r + ky, x * r + kx, n);
                                    if st.step.op == OpClass::Pool {
                                        rf.r(src, at, e);
                                    } else {
                                        rf.r(lt.dz.unwrap().tensor, o, e);
                                        rf.r(ids, o, e);
                                        rf.w(dest.tensor, at, e);
                                        if let Some((_, g)) = gate {
                                            rf.r(g.tensor, at, e);
                                        }
                                    }
                                }
                            }
                            if st.step.op == OpClass::Pool {
                                rf.w(lt.y.unwrap().tensor, o, e);
                                rf.w(ids, o, e);
                            }
                        }
                    }
                }
            }
        }
        OpClass::Merge | OpClass::Partition => {
            let (src, dst) = if st.step.op == OpClass::Merge {
                (lt.y.unwrap().tensor, lt.merged.unwrap())
            } else {
                let p = net.producer(i).unwrap();
                (lay.layers[p].dx_common.unwrap(), lay.layers[p].dz.unwrap().tensor)
            };
            let pix_t = if st.step.op == OpClass::Merge { src } else { dst };
            let g = dims(lay, pix_t);
            for e in 0..pes {
                for p in ranges(g.1 * g.2, pes)[e].clone() {
                    for d in 0..g.0 {
                        for n in 0..m {
                            let at = vol_idx(g, m, d, p / g.2, p % g.2, n);
                            rf.r(src, at, e);
                            rf.w(dst, at, e);
                        }
                    }
                }
            }
        }
        OpClass::AddPad | OpClass::RemovePad => {
            let LayerKind::Conv(c) = net.layers[i].kind else { unreachable!() };
            let xp = lt.padded.unwrap();
            let src = lay.x_view(net, i).tensor;
            let Placement::RowStrips { strips, .. } = &lay.tensors[xp].placement else { unreachable!() };
            let (r, pg, ig) = (c.pad, (c.in_d, c.padded_h(), c.padded_w()), (c.in_d, c.in_h, c.in_w));
            for (e, s) in strips.iter().enumerate() {
                for py in s.clone() {
                    for px in 0..pg.2 {
                        for d in 0..c.in_d {
                            for n in 0..m {
                                let inside = py >= r && py < r + c.in_h && px >= r && px < r + c.in_w;
                                let pat = vol_idx(pg, m, d, py, px, n);
                                let at = inside.then(|| vol_idx(ig, m, d, py - r, px - r, n));
                                if st.step.op == OpClass::AddPad {
                                    if let Some(a) = at {
                                        rf.r(src, a, e);
                                    }
                                    rf.w(xp, pat, e);
                                } else if let Some(a) = at {
                                    rf.r(xp, pat, e);
                                    rf.w(src, a, e);
                                }
                            }
                        }
                    }
                }
            }
        }
        OpClass::LossEval => {}
    }
    rf.s
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub step: String,
    pub op: OpClass,
    pub ok: bool,
    pub detail: String,
}

fn compare(step: String, op: OpClass, got: Result<Streams, PmagError>, want: Streams) -> OracleResult {
    match got {
        Err(e) => OracleResult { step, op, ok: false, detail: e.to_string() },
        Ok(g) => {
            let ok = g == want;
            let detail = if ok {
                format!("{} reads, {} writes", g.reads.values().sum::<u64>(), g.writes.len())
            } else {
                format!(
                    "reads {} vs {} (distinct {} vs {}), writes {} vs {}",
                    g.reads.values().sum::<u64>(),
                    want.reads.values().sum::<u64>(),
                    g.reads.len(),
                    want.reads.len(),
                    g.writes.len(),
                    want.writes.len()
                )
            };
            OracleResult { step, op, ok, detail }
        }
    }
}

/// Check every non-element-wise step of `net` compiled for `cfg`, plus a
/// remove-pad program for each padded conv layer. Steps of recurrent layers
/// have no loop-nest reference and are left out.
pub fn address_oracle(net: &NetworkSpec, cfg: &MachineConfig) -> Result<Vec<OracleResult>, crate::compiler::CompileError> {
    let c = crate::compiler::compile(net, cfg)?;
    let mut out = Vec::new();
    for st in &c.steps {
        if st.step.op == OpClass::LossEval || st.step.sub.is_elementwise() || !oracle_covers(net, st) {
            continue;
        }
        let want = reference(net, &c.layout, st);
        out.push(compare(st.step.to_string(), st.step.op, from_programs(&c.layout, &st.work), want));
        if st.step.op == OpClass::AddPad {
            let i = st.step.layer;
            let LayerKind::Conv(conv) = net.layers[i].kind else { unreachable!() };
            let lay = &c.layout;
            let xp = lay.layers[i].padded.unwrap();
            let src = lay.x_view(net, i).tensor;
            let Placement::RowStrips { strips, .. } = &lay.tensors[xp].placement else { unreachable!() };
            let work = pad_programs(
                OpClass::RemovePad,
                src,
                xp,
                &conv,
                lay.batch,
                strips,
                (lay.tensors[src].len, lay.tensors[xp].len),
                32,
            );
            let fake = StepPrograms { work: work.clone(), ..st.clone() };
            let mut fake = fake;
            fake.step.op = OpClass::RemovePad;
            let want = reference(net, lay, &fake);
            out.push(compare(format!("{} (remove pad)", st.step), OpClass::RemovePad, from_programs(lay, &work), want));
        }
    }
    Ok(out)
}

pub fn oracle_covers(net: &NetworkSpec, st: &StepPrograms) -> bool {
    !matches!(net.layers[st.step.layer].kind, LayerKind::Recurrent { .. })
}

/// Small networks covering every table row, at extents of at most 8.
pub fn oracle_nets() -> Vec<NetworkSpec> {
    let srcs = [
        "conv in_w=6 in_h=6 in_d=2 kernels=3 kw=3 kh=3\nact fn=relu\nmaxpool radius=2\nfc in=27 out=4\nact fn=sigmoid\nfc in=4 out=3\nloss fn=softmax_ce\ntrain batch=2 lr=0.1\n",
        "conv in_w=5 in_h=4 in_d=1 kernels=2 kw=3 kh=3\nact fn=tanh\nconv in_w=5 in_h=4 in_d=2 kernels=2 kw=1 kh=1\nfc in=40 out=3\nloss fn=mse\ntrain batch=3 lr=0.1\n",
        "fc in=8 out=7\nact fn=relu\nfc in=7 out=5\nloss fn=mse\ntrain batch=4 lr=0.1\n",
    ];
    srcs.iter().map(|s| crate::netspec::parse_network(s).expect("oracle net parses")).collect()
}

/// Machine variants with 2 to 4 PEs.
pub fn oracle_configs() -> Vec<MachineConfig> {
    (2..=4)
        .map(|p| MachineConfig { name: format!("pe{p}"), vaults: p + 1, pes: p, ..MachineConfig::hmc1() })
        .collect()
}
