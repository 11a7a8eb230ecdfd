//! Functional execution of compiled steps over vault memory.

use std::collections::HashMap;

use crate::compiler::{Dir, LayoutPlan, PeOp, PmagProgram, StepPrograms, TensorId, View};
use crate::fxnum::{Acc, LutFn, PhaseArith};
use crate::goldref::{ops, out_gate, Target};
use crate::netspec::{LayerKind, NetworkSpec, OpClass, Phase, SubOp};
use crate::pmag::{prep_exec, resolve, zip, PmagError, Point, PrepKind};

use super::memory::VaultMemory;

/// Per-phase arithmetic units.
#[derive(Clone, Debug)]
pub struct Arith {
    pub ff: PhaseArith,
    pub bp: PhaseArith,
    pub up: PhaseArith,
}

impl Arith {
    pub fn phase(&mut self, p: Phase) -> &mut PhaseArith {
        match p {
            Phase::FF | Phase::Prep => &mut self.ff,
            Phase::BP => &mut self.bp,
            Phase::UP => &mut self.up,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Mac(Acc),
    Max { best: f64, id: u32 },
    Val(f64),
}

#[derive(Clone, Copy, Debug)]
struct OutRec {
    tensor: TensorId,
    at: (usize, usize),
    idx: usize,
    lut: Option<LutFn>,
    gate: Option<(LutFn, f64)>,
    ids: Option<(usize, usize)>,
}

struct Ctx<'a> {
    lay: &'a LayoutPlan,
    mem: &'a VaultMemory,
    pe: usize,
}

impl Ctx<'_> {
    fn logical(p: &PmagProgram, a: i64, lane: u32) -> usize {
        (a + lane as i64 * p.lane_stride) as usize
    }

    fn read(&self, ar: &PhaseArith, p: &PmagProgram, pt: Point, lane: u32) -> Result<f64, PmagError> {
        match pt {
            Point::Addr(a) => {
                let lane = if p.lane_stride == 0 { 0 } else { lane };
                let (v, pa) = resolve(self.lay, p, a, lane, self.pe)?;
                Ok(ar.narrow(self.mem.vaults[v][pa]))
            }
            _ => Ok(0.0),
        }
    }
}

/// Accumulators of one PE in first-touch order.
#[derive(Default)]
struct Partials {
    order: Vec<(TensorId, usize)>,
    slots: HashMap<(TensorId, usize), (Slot, OutRec)>,
}

fn run_pe(
    st: &StepPrograms,
    w: &crate::compiler::PeWork,
    lay: &LayoutPlan,
    mem: &VaultMemory,
    ar: &mut PhaseArith,
) -> Result<Partials, PmagError> {
    let cx = Ctx { lay, mem, pe: w.pe };
    let mut parts = Partials::default();
    for seg in &w.segments {
        let lanes = seg.out.lanes.max(1);
        for zp in zip(seg) {
            let Point::Addr(o) = zp.out else { continue };
            for lane in 0..lanes {
                let idx = Ctx::logical(&seg.out, o, lane);
                let key = (seg.out.tensor, idx);
                let fresh = !parts.slots.contains_key(&key);
                if fresh {
                    let at = resolve(lay, &seg.out, o, lane, w.pe)?;
                    let gate = match (&seg.gate, zp.gate) {
                        (Some(g), Some(gp)) => {
                            let y = cx.read(ar, g, gp, lane)?;
                            Some((g.lut.expect("gate program carries a derivative"), y))
                        }
                        _ => None,
                    };
                    let ids = match (&seg.b, zp.b) {
                        (Some(b), Some(Point::Addr(bi))) if b.dir == Dir::Write => Some(resolve(lay, b, bi, lane, w.pe)?),
                        _ => None,
                    };
                    let slot = match (st.pe.op, st.step.op) {
                        (PeOp::Max, OpClass::Pool) => Slot::Max { best: f64::NEG_INFINITY, id: 0 },
                        (PeOp::Max, _) => Slot::Val(0.0),
                        _ => Slot::Mac(ar.zero()),
                    };
                    let rec = OutRec { tensor: seg.out.tensor, at, idx, lut: seg.out.lut, gate, ids };
                    parts.order.push(key);
                    parts.slots.insert(key, (slot, rec));
                }
                let slot = &mut parts.slots.get_mut(&key).unwrap().0;
                match slot {
                    Slot::Mac(acc) => {
                        let a = cx.read(ar, &seg.a, zp.a, lane)?;
                        let b = match (&seg.b, zp.b) {
                            (Some(bp), Some(pt)) => cx.read(ar, bp, pt, lane)?,
                            _ => 1.0,
                        };
                        ar.mac(acc, a, b);
                    }
                    Slot::Max { best, id } => {
                        let v = cx.read(ar, &seg.a, zp.a, lane)?;
                        let pos = zp.ctr[4] * seg.a.radius + zp.ctr[5];
                        if fresh || v > *best {
                            *best = v;
                            *id = pos;
                        }
                    }
                    Slot::Val(v) => {
                        let dy = cx.read(ar, &seg.a, zp.a, lane)?;
                        let id = match (&seg.b, zp.b) {
                            (Some(bp), Some(pt)) => cx.read(ar, bp, pt, lane)?,
                            _ => 0.0,
                        };
                        let pos = zp.ctr[4] * seg.out.radius + zp.ctr[5];
                        if id as u32 == pos {
                            *v = dy;
                        }
                    }
                }
            }
        }
    }
    Ok(parts)
}

/// Store a finished value; update steps also apply SGD to the master weight.
fn commit(
    net: &NetworkSpec,
    lay: &LayoutPlan,
    st: &StepPrograms,
    mem: &mut VaultMemory,
    ar: &mut PhaseArith,
    rec: &OutRec,
    slot: Slot,
) {
    let v = match slot {
        Slot::Mac(acc) => {
            let v = ar.finish(acc, st.divisor);
            match rec.lut {
                Some(f) => ar.act(f, v),
                None => v,
            }
        }
        Slot::Max { best, id } => {
            if let Some((v, a)) = rec.ids {
                mem.vaults[v][a] = id as f64;
            }
            best
        }
        Slot::Val(v) => v,
    };
    let v = match rec.gate {
        Some((f, y)) => {
            let y = ar.narrow(y);
            ar.gate(v, y, f)
        }
        None => v,
    };
    mem.vaults[rec.at.0][rec.at.1] = v;
    if st.step.phase == Phase::UP {
        let lt = &lay.layers[st.step.layer];
        if let Some(g) = lt.dw.iter().position(|&t| t == rec.tensor) {
            let wt = lt.w[g];
            let old = mem.read(lay, wt, rec.idx, None);
            let new = ar.sgd(old, v, net.train.lr);
            mem.write(lay, wt, rec.idx, new);
        }
    }
}

fn run_mac(
    net: &NetworkSpec,
    lay: &LayoutPlan,
    st: &StepPrograms,
    mem: &mut VaultMemory,
    ar: &mut PhaseArith,
) -> Result<(), PmagError> {
    let mut per_pe = Vec::with_capacity(st.work.len());
    for w in &st.work {
        per_pe.push(run_pe(st, w, lay, mem, ar)?);
    }
    if st.merge {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for p in &per_pe {
            for k in &p.order {
                if seen.insert(*k) {
                    order.push(*k);
                }
            }
        }
        for k in order {
            let mut total = ar.zero();
            let mut rec = None;
            for p in &per_pe {
                if let Some((Slot::Mac(acc), r)) = p.slots.get(&k) {
                    total.merge(*acc);
                    rec.get_or_insert(*r);
                }
            }
            let mut r = rec.expect("merged key has a record");
            // The merged value lands in the sink's copy.
            r.at = lay.locate(r.tensor, r.idx, None);
            commit(net, lay, st, mem, ar, &r, Slot::Mac(total));
        }
    } else {
        for p in per_pe {
            for k in &p.order {
                let (slot, rec) = p.slots[k];
                commit(net, lay, st, mem, ar, &rec, slot);
            }
        }
    }
    Ok(())
}

fn read_view(lay: &LayoutPlan, mem: &VaultMemory, ar: &PhaseArith, v: View, rows: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * m);
    for j in 0..rows {
        for n in 0..m {
            out.push(ar.narrow(mem.read(lay, v.tensor, v.at(j, n), None)));
        }
    }
    out
}

fn write_view(lay: &LayoutPlan, mem: &mut VaultMemory, v: View, m: usize, data: &[f64]) {
    for (e, &x) in data.iter().enumerate() {
        mem.write(lay, v.tensor, v.at(e / m, e % m), x);
    }
}

/// Loss gradient at the network output, gated into the producer's dZ.
fn run_loss(net: &NetworkSpec, lay: &LayoutPlan, i: usize, mem: &mut VaultMemory, ar: &mut PhaseArith, target: &Target) {
    let m = lay.batch;
    let p = net.producer(i).expect("loss has a producer");
    let c = net.layers[p].output.len();
    let (yv, dzv) = (lay.layers[p].y.unwrap(), lay.layers[p].dz.unwrap());
    let y = read_view(lay, mem, ar, yv, c, m);
    let mut dy = ops::loss_grad(ar, net.loss(), &y, target, c, m);
    if let Some(f) = out_gate(net, p) {
        for (d, &yy) in dy.iter_mut().zip(&y) {
            *d = ar.gate(*d, ar.narrow(yy), f);
        }
    }
    write_view(lay, mem, dzv, m, &dy);
}

/// GRU element-wise glue between the gate matrix products.
fn run_gru_glue(net: &NetworkSpec, lay: &LayoutPlan, st: &StepPrograms, mem: &mut VaultMemory, ar: &mut PhaseArith) {
    let i = st.step.layer;
    let LayerKind::Recurrent { input: ni, hidden: nh, steps, .. } = net.layers[i].kind else {
        unreachable!("glue step on a non-recurrent layer")
    };
    let m = lay.batch;
    let t = st.step.time.expect("recurrent steps are time-indexed");
    let ct = lay.layers[i].cell.as_ref().unwrap();
    let (tn, tn1) = (steps * m, (steps + 1) * m);
    let blk = |tensor: TensorId, t: usize, row: usize| View { tensor, base: t * m, row };
    let rd = |mem: &VaultMemory, ar: &PhaseArith, v: View| read_view(lay, mem, ar, v, nh, m);
    let hs_t = blk(ct.hs, t, tn1);
    let len = nh * m;
    match st.step.sub {
        SubOp::ResetMul => {
            let (r, h) = (rd(mem, ar, blk(ct.r.unwrap(), t, tn)), rd(mem, ar, hs_t));
            let rh: Vec<f64> = (0..len).map(|e| ar.mul(r[e], h[e])).collect();
            write_view(lay, mem, blk(ct.rh.unwrap(), t, tn), m, &rh);
        }
        SubOp::Combine => {
            let nn = rd(mem, ar, blk(ct.n.unwrap(), t, tn));
            let z = rd(mem, ar, blk(ct.z.unwrap(), t, tn));
            let h = rd(mem, ar, hs_t);
            let hn: Vec<f64> = (0..len).map(|e| ops::gru_combine(ar, nn[e], z[e], h[e])).collect();
            write_view(lay, mem, blk(ct.hs, t + 1, tn1), m, &hn);
        }
        SubOp::CombineGrad => {
            let dh = rd(mem, ar, blk(ct.dh.unwrap(), t + 1, tn1));
            let z = rd(mem, ar, blk(ct.z.unwrap(), t, tn));
            let nn = rd(mem, ar, blk(ct.n.unwrap(), t, tn));
            let h = rd(mem, ar, hs_t);
            let (mut dn, mut dz, mut dd) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
            for e in 0..len {
                (dn[e], dz[e], dd[e]) = ops::gru_combine_grad(ar, dh[e], z[e], nn[e], h[e]);
            }
            write_view(lay, mem, blk(ct.dn.unwrap(), t, tn), m, &dn);
            write_view(lay, mem, blk(ct.dz, t, tn), m, &dz);
            write_view(lay, mem, View::whole(ct.dh_dir.unwrap(), m), m, &dd);
        }
        SubOp::ResetGrad => {
            let du = View { tensor: ct.du[2], base: ni * m, row: m };
            let drh = rd(mem, ar, du);
            let r = rd(mem, ar, blk(ct.r.unwrap(), t, tn));
            let h = rd(mem, ar, hs_t);
            let (mut dr, mut dhr) = (vec![0.0; len], vec![0.0; len]);
            for e in 0..len {
                (dr[e], dhr[e]) = ops::gru_reset_grad(ar, drh[e], r[e], h[e]);
            }
            write_view(lay, mem, blk(ct.dr.unwrap(), t, tn), m, &dr);
            write_view(lay, mem, View::whole(ct.dh_r.unwrap(), m), m, &dhr);
        }
        SubOp::GradSum => {
            let cols = ni + nh;
            let du: Vec<Vec<f64>> = ct.du.iter().map(|&d| read_view(lay, mem, ar, View::whole(d, m), cols, m)).collect();
            let (dest, gate) = lay.dx_dest(net, i);
            for j in 0..ni {
                for n in 0..m {
                    let e = j * m + n;
                    let s = ar.add(du[2][e], du[1][e]);
                    let mut v = ar.add(s, du[0][e]);
                    let at = dest.at(t * ni + j, n);
                    if let Some((f, g)) = gate {
                        let y = ar.narrow(mem.read(lay, g.tensor, g.at(t * ni + j, n), None));
                        v = ar.gate(v, y, f);
                    }
                    mem.write(lay, dest.tensor, at, v);
                }
            }
            let dd = rd(mem, ar, View::whole(ct.dh_dir.unwrap(), m));
            let dhr = rd(mem, ar, View::whole(ct.dh_r.unwrap(), m));
            let mut dh = vec![0.0; len];
            for e in 0..len {
                let s = ar.add(dd[e], dhr[e]);
                let s = ar.add(s, du[1][ni * m + e]);
                dh[e] = ar.add(s, du[0][ni * m + e]);
            }
            write_view(lay, mem, blk(ct.dh.unwrap(), t, tn1), m, &dh);
        }
        other => unreachable!("{other:?} is not element-wise"),
    }
}

/// Execute one step's functional effect on `mem`.
pub fn execute(
    net: &NetworkSpec,
    lay: &LayoutPlan,
    st: &StepPrograms,
    mem: &mut VaultMemory,
    arith: &mut Arith,
    target: &Target,
) -> Result<(), PmagError> {
    let ar = arith.phase(st.step.phase);
    match st.step.op {
        OpClass::Merge => prep_exec(PrepKind::Merge, &st.work, lay, mem),
        OpClass::Partition => prep_exec(PrepKind::Partition, &st.work, lay, mem),
        OpClass::AddPad => prep_exec(PrepKind::AddPad, &st.work, lay, mem),
        OpClass::RemovePad => prep_exec(PrepKind::RemovePad, &st.work, lay, mem),
        OpClass::LossEval => {
            run_loss(net, lay, st.step.layer, mem, ar, target);
            Ok(())
        }
        _ if st.step.sub.is_elementwise() => {
            run_gru_glue(net, lay, st, mem, ar);
            Ok(())
        }
        _ => run_mac(net, lay, st, mem, ar),
    }
}
