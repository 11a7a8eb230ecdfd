//! Vault data layout: where every tensor of a training step lives.

use std::ops::Range;

use crate::fxnum::{LutFn, NumericMode};
use crate::goldref::out_gate;
use crate::machine::MachineConfig;
use crate::netspec::{CellKind, ConvSpec, LayerKind, NetworkSpec, Shape};
use crate::partition::{owner, ranges};

use super::CompileError;

pub type TensorId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Whole tensor in the common vault.
    Common,
    /// Stored in the common vault and copied into every PE's buffer.
    Replicated,
    /// Matrix rows split across PE vaults with `ranges(rows, pes)`.
    RowSplit { rows: usize, cols: usize },
    /// Volume (d, y, x, n) with the (y, x) plane split across PE vaults.
    PixelSplit { d: usize, h: usize, w: usize, n: usize },
    /// Padded volume; each PE holds the rows its outputs read, halo included.
    RowStrips { d: usize, hp: usize, wp: usize, n: usize, strips: Vec<Range<usize>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub len: usize,
    pub placement: Placement,
    pub elem_bytes: usize,
    /// Conv input consumed by the update step as a lowered matrix.
    pub lowered: bool,
}

/// Matrix view (rows j, samples n) onto a tensor: idx = base + j*row + n.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub tensor: TensorId,
    pub base: usize,
    pub row: usize,
}

impl View {
    pub fn whole(tensor: TensorId, n: usize) -> Self {
        Self { tensor, base: 0, row: n }
    }

    pub fn at(&self, j: usize, n: usize) -> usize {
        self.base + j * self.row + n
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellTensors {
    /// h_0..h_T, H x (T+1)N.
    pub hs: TensorId,
    /// GRU gate outputs, H x TN.
    pub z: Option<TensorId>,
    pub r: Option<TensorId>,
    pub rh: Option<TensorId>,
    pub n: Option<TensorId>,
    /// Pre-activation gradients per gate, H x TN.
    pub dz: TensorId,
    pub dr: Option<TensorId>,
    pub dn: Option<TensorId>,
    /// GRU state gradients, H x (T+1)N, and per-step scratch.
    pub dh: Option<TensorId>,
    pub dh_dir: Option<TensorId>,
    pub dh_r: Option<TensorId>,
    /// GRU per-gate input gradients [dx; dh], (I+H) x N: z, r, n.
    pub du: Vec<TensorId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTensors {
    pub w: Vec<TensorId>,
    pub dw: Vec<TensorId>,
    /// Output after any fused activation.
    pub y: Option<View>,
    /// Gradient at the pre-activation output.
    pub dz: Option<View>,
    /// Common copy of a volume output read by a matrix consumer.
    pub merged: Option<TensorId>,
    /// Common landing zone for the consumer's dX before partitioning.
    pub dx_common: Option<TensorId>,
    pub padded: Option<TensorId>,
    pub ids: Option<TensorId>,
    pub cell: Option<CellTensors>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutPlan {
    pub pes: usize,
    pub vaults: usize,
    pub common: usize,
    pub batch: usize,
    pub tensors: Vec<TensorInfo>,
    /// Per tensor, per vault: base element offset of its local region.
    pub bases: Vec<Vec<usize>>,
    pub vault_elems: Vec<usize>,
    pub vault_bytes: Vec<u64>,
    pub layers: Vec<LayerTensors>,
    pub input: TensorId,
    pub dx_input: TensorId,
    pub target: TensorId,
}

fn bytes(mode: NumericMode) -> usize {
    match mode {
        NumericMode::Fixed16 => 2,
        _ => 4,
    }
}

/// Padded rows read by the outputs in each PE's pixel range.
pub fn conv_strips(c: &ConvSpec, pes: usize) -> Vec<Range<usize>> {
    let (ow, k) = (c.out_w(), c.kh);
    ranges(c.out_h() * ow, pes)
        .into_iter()
        .map(|r| if r.is_empty() { 0..0 } else { r.start / ow..(r.end - 1) / ow + k })
        .collect()
}

struct Builder {
    pes: usize,
    tensors: Vec<TensorInfo>,
}

impl Builder {
    fn add(&mut self, name: String, len: usize, placement: Placement, elem_bytes: usize) -> TensorId {
        self.tensors.push(TensorInfo { name, len, placement, elem_bytes, lowered: false });
        self.tensors.len() - 1
    }

    fn common(&mut self, name: String, len: usize, b: usize) -> TensorId {
        self.add(name, len, Placement::Common, b)
    }

    fn rows(&mut self, name: String, rows: usize, cols: usize, b: usize) -> TensorId {
        self.add(name, rows * cols, Placement::RowSplit { rows, cols }, b)
    }

    fn pixels(&mut self, name: String, s: Shape, n: usize, b: usize) -> TensorId {
        let (d, h, w) = match s {
            Shape::Volume { d, h, w } => (d, h, w),
            Shape::Vector(len) => (len, 1, 1),
        };
        self.add(name, d * h * w * n, Placement::PixelSplit { d, h, w, n }, b)
    }

    fn local_len(&self, t: &TensorInfo, vault: usize, common: usize) -> usize {
        match &t.placement {
            Placement::Common | Placement::Replicated => {
                if vault == common {
                    t.len
                } else {
                    0
                }
            }
            _ if vault >= self.pes => 0,
            Placement::RowSplit { rows, cols } => ranges(*rows, self.pes)[vault].len() * cols,
            Placement::PixelSplit { d, h, w, n } => d * ranges(h * w, self.pes)[vault].len() * n,
            Placement::RowStrips { d, wp, n, strips, .. } => d * strips[vault].len() * wp * n,
        }
    }
}

pub fn plan_layout(net: &NetworkSpec, cfg: &MachineConfig) -> Result<LayoutPlan, CompileError> {
    let (pes, m) = (cfg.pes, net.train.batch);
    let (bf, bb, bu) = (bytes(net.train.ff), bytes(net.train.bp), bytes(net.train.up));
    let mut b = Builder { pes, tensors: Vec::new() };
    let input = b.common("input".into(), net.input_shape().len() * m, bf);
    let dx_input = match net.layers[0].kind {
        LayerKind::Conv(_) | LayerKind::MaxPool { .. } => b.pixels("dx_input".into(), net.input_shape(), m, bb),
        _ => b.common("dx_input".into(), net.input_shape().len() * m, bb),
    };
    let target = b.common("target".into(), net.output_shape().len() * m, bb);
    let half = cfg.input_buffer_bytes / 2;
    let mut layers = vec![LayerTensors::default(); net.layers.len()];
    for (i, l) in net.layers.iter().enumerate() {
        let lt = &mut layers[i];
        match l.kind {
            LayerKind::Conv(c) => {
                let plane = c.kh * c.kw * bu;
                if plane > half {
                    return Err(CompileError::Buffer { what: format!("layer {i} kernel plane"), needed: plane, half });
                }
                lt.w.push(b.add(format!("L{i}.w"), c.weights(), Placement::Replicated, bu));
                lt.dw.push(b.common(format!("L{i}.dw"), c.weights(), bu));
                if c.pad > 0 {
                    let strips = conv_strips(&c, pes);
                    let (hp, wp) = (c.padded_h(), c.padded_w());
                    let xp = b.add(
                        format!("L{i}.xpad"),
                        c.in_d * hp * wp * m,
                        Placement::RowStrips { d: c.in_d, hp, wp, n: m, strips },
                        bf,
                    );
                    b.tensors[xp].lowered = true;
                    lt.padded = Some(xp);
                }
                lt.y = Some(View::whole(b.pixels(format!("L{i}.y"), l.output, m, bf), m));
                lt.dz = Some(View::whole(b.pixels(format!("L{i}.dz"), l.output, m, bb), m));
            }
            LayerKind::MaxPool { .. } => {
                lt.y = Some(View::whole(b.pixels(format!("L{i}.y"), l.output, m, bf), m));
                lt.ids = Some(b.pixels(format!("L{i}.ids"), l.output, m, 2));
                lt.dz = Some(View::whole(b.pixels(format!("L{i}.dz"), l.output, m, bb), m));
            }
            LayerKind::Fc { input, output } => {
                lt.w.push(b.rows(format!("L{i}.w"), output, input, bu));
                lt.dw.push(b.rows(format!("L{i}.dw"), output, input, bu));
                lt.y = Some(View::whole(b.common(format!("L{i}.y"), output * m, bf), m));
                lt.dz = Some(View::whole(b.rows(format!("L{i}.dz"), output, m, bb), m));
            }
            LayerKind::Recurrent { input, hidden, steps, cell } => {
                let (tn, tn1, cols) = (steps * m, (steps + 1) * m, input + hidden);
                for g in 0..cell.gates() {
                    lt.w.push(b.rows(format!("L{i}.w{g}"), hidden, cols, bu));
                    lt.dw.push(b.rows(format!("L{i}.dw{g}"), hidden, cols, bu));
                }
                let mut ct = CellTensors {
                    hs: b.common(format!("L{i}.hs"), hidden * tn1, bf),
                    dz: b.rows(format!("L{i}.dzg"), hidden, tn, bb),
                    ..Default::default()
                };
                lt.y = Some(View { tensor: ct.hs, base: steps * m, row: tn1 });
                match cell {
                    CellKind::Elman => {
                        lt.dz = Some(View { tensor: ct.dz, base: (steps - 1) * m, row: tn });
                    }
                    CellKind::Gru => {
                        ct.z = Some(b.common(format!("L{i}.z"), hidden * tn, bf));
                        ct.r = Some(b.common(format!("L{i}.r"), hidden * tn, bf));
                        ct.rh = Some(b.common(format!("L{i}.rh"), hidden * tn, bf));
                        ct.n = Some(b.common(format!("L{i}.n"), hidden * tn, bf));
                        ct.dr = Some(b.rows(format!("L{i}.dr"), hidden, tn, bb));
                        ct.dn = Some(b.rows(format!("L{i}.dn"), hidden, tn, bb));
                        let dh = b.common(format!("L{i}.dh"), hidden * tn1, bb);
                        ct.dh = Some(dh);
                        ct.dh_dir = Some(b.common(format!("L{i}.dh_dir"), hidden * m, bb));
                        ct.dh_r = Some(b.common(format!("L{i}.dh_r"), hidden * m, bb));
                        ct.du = (0..3).map(|g| b.common(format!("L{i}.du{g}"), cols * m, bb)).collect();
                        lt.dz = Some(View { tensor: dh, base: steps * m, row: tn1 });
                    }
                }
                lt.cell = Some(ct);
            }
            LayerKind::Activation(_) | LayerKind::Loss(_) => {}
        }
        let matrix_consumer = net
            .consumer(i)
            .is_some_and(|c| matches!(net.layers[c].kind, LayerKind::Fc { .. } | LayerKind::Recurrent { .. }));
        if matrix_consumer && l.output.is_volume() {
            let len = l.output.len() * m;
            layers[i].merged = Some(b.common(format!("L{i}.merged"), len, bf));
            layers[i].dx_common = Some(b.common(format!("L{i}.dx_common"), len, bb));
        }
    }

    let common = cfg.common_vault();
    let mut bases = Vec::with_capacity(b.tensors.len());
    let mut vault_elems = vec![0usize; cfg.vaults];
    let mut vault_bytes = vec![0u64; cfg.vaults];
    let mut largest: Vec<(usize, String)> = vec![(0, String::new()); cfg.vaults];
    for t in &b.tensors {
        let mut row = vec![0; cfg.vaults];
        for v in 0..cfg.vaults {
            let n = b.local_len(t, v, common);
            row[v] = vault_elems[v];
            vault_elems[v] += n;
            vault_bytes[v] += (n * t.elem_bytes) as u64;
            if n * t.elem_bytes > largest[v].0 {
                largest[v] = (n * t.elem_bytes, t.name.clone());
            }
        }
        bases.push(row);
    }
    for (v, &used) in vault_bytes.iter().enumerate() {
        if used > cfg.vault_capacity_bytes {
            return Err(CompileError::Capacity {
                vault: v,
                needed: used,
                capacity: cfg.vault_capacity_bytes,
                tensor: largest[v].1.clone(),
            });
        }
    }
    Ok(LayoutPlan {
        pes,
        vaults: cfg.vaults,
        common,
        batch: m,
        tensors: b.tensors,
        bases,
        vault_elems,
        vault_bytes,
        layers,
        input,
        dx_input,
        target,
    })
}

impl LayoutPlan {
    /// (vault, physical element address) of logical element `idx`. Strip
    /// placements prefer the reading PE's own copy.
    pub fn locate(&self, t: TensorId, idx: usize, reader: Option<usize>) -> (usize, usize) {
        let info = &self.tensors[t];
        debug_assert!(idx < info.len, "{}[{idx}] out of {}", info.name, info.len);
        let (v, off) = match &info.placement {
            Placement::Common | Placement::Replicated => (self.common, idx),
            Placement::RowSplit { rows, cols } => {
                let r = idx / cols;
                let pe = owner(*rows, self.pes, r);
                let lo = ranges(*rows, self.pes)[pe].start;
                (pe, idx - lo * cols)
            }
            Placement::PixelSplit { h, w, n, .. } => {
                let plane = h * w;
                let (s, pix, d) = (idx % n, (idx / n) % plane, idx / (n * plane));
                let pe = owner(plane, self.pes, pix);
                let r = ranges(plane, self.pes)[pe].clone();
                (pe, (d * r.len() + pix - r.start) * n + s)
            }
            Placement::RowStrips { hp, wp, n, strips, .. } => {
                let (s, x, y, d) = (idx % n, (idx / n) % wp, (idx / (n * wp)) % hp, idx / (n * wp * hp));
                let pe = match reader {
                    Some(p) if strips[p].contains(&y) => p,
                    _ => strips.iter().position(|r| r.contains(&y)).expect("row covered by a strip"),
                };
                let r = &strips[pe];
                (pe, ((d * r.len() + y - r.start) * wp + x) * n + s)
            }
        };
        (v, self.bases[t][v] + off)
    }

    /// Every PE copy of a strip element (for writes that must keep halos coherent).
    pub fn copies(&self, t: TensorId, idx: usize) -> Vec<(usize, usize)> {
        match &self.tensors[t].placement {
            Placement::RowStrips { hp, wp, n, strips, .. } => {
                let y = (idx / (n * wp)) % hp;
                (0..self.pes).filter(|&p| strips[p].contains(&y)).map(|p| self.locate(t, idx, Some(p))).collect()
            }
            _ => vec![self.locate(t, idx, None)],
        }
    }

    pub fn is_local(&self, t: TensorId, idx: usize, pe: usize) -> bool {
        self.locate(t, idx, Some(pe)).0 == pe
    }

    /// Input of layer `i` as read by its FF step.
    pub fn x_view(&self, net: &NetworkSpec, i: usize) -> View {
        match net.producer(i) {
            Some(p) => match (self.layers[p].merged, net.layers[i].kind) {
                (Some(t), LayerKind::Fc { .. } | LayerKind::Recurrent { .. }) => View::whole(t, self.batch),
                _ => self.layers[p].y.expect("producer has an output"),
            },
            None => View::whole(self.input, self.batch),
        }
    }

    /// Tensor read by conv layer `i` in padded coordinates.
    pub fn conv_input(&self, net: &NetworkSpec, i: usize) -> TensorId {
        self.layers[i].padded.unwrap_or_else(|| self.x_view(net, i).tensor)
    }

    /// Where layer `i`'s BP writes dX, and the derivative gating it.
    pub fn dx_dest(&self, net: &NetworkSpec, i: usize) -> (View, Option<(LutFn, View)>) {
        let Some(p) = net.producer(i) else {
            return (View::whole(self.dx_input, self.batch), None);
        };
        let pl = &self.layers[p];
        let gate = out_gate(net, p);
        match (pl.dx_common, net.layers[i].kind) {
            (Some(t), LayerKind::Fc { .. } | LayerKind::Recurrent { .. }) => (
                View::whole(t, self.batch),
                gate.map(|f| (f, View::whole(pl.merged.expect("merged with dx_common"), self.batch))),
            ),
            _ => (pl.dz.expect("producer has a gradient"), gate.map(|f| (f, pl.y.expect("producer output")))),
        }
    }

    pub fn footprint(&self) -> u64 {
        self.vault_bytes.iter().sum()
    }

    pub fn tensor_named(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name)
    }
}

/// Elements per sample of a conv input before and after lowering for the update step.
pub fn lowered_footprint(c: &ConvSpec) -> (usize, usize) {
    (c.in_d * c.in_h * c.in_w, c.out_h() * c.out_w() * c.kh * c.kw * c.in_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::parse_network;
    use std::collections::HashSet;

    fn net(src: &str) -> NetworkSpec {
        parse_network(src).unwrap()
    }

    fn small() -> MachineConfig {
        let mut c = MachineConfig::hmc1();
        c.vaults = 4;
        c.pes = 3;
        c
    }

    const CNN: &str = "conv in_w=6 in_h=6 in_d=2 kernels=3 kw=3 kh=3\nact fn=relu\nmaxpool radius=2\nfc in=27 out=4\nloss fn=softmax_ce\ntrain batch=2 lr=0.1 modes=ff:float,bp:float,up:float\n";

    #[test]
    fn placements_follow_operand_classes() {
        let n = net(CNN);
        let l = plan_layout(&n, &small()).unwrap();
        let conv = &l.layers[0];
        assert_eq!(l.tensors[conv.w[0]].placement, Placement::Replicated);
        assert!(matches!(l.tensors[conv.padded.unwrap()].placement, Placement::RowStrips { .. }));
        assert!(l.tensors[conv.padded.unwrap()].lowered);
        let fc = &l.layers[3];
        assert_eq!(l.tensors[fc.w[0]].placement, Placement::RowSplit { rows: 4, cols: 27 });
        assert_eq!(l.x_view(&n, 3).tensor, l.layers[2].merged.unwrap());
        assert_eq!(l.tensors[l.x_view(&n, 3).tensor].placement, Placement::Common);
    }

    #[test]
    fn fc_4096_rows_split_over_15_pes() {
        let n = net("fc in=4096 out=4096\nloss fn=mse\ntrain batch=1 lr=0.1\n");
        let l = plan_layout(&n, &MachineConfig::hmc1()).unwrap();
        let w = l.layers[0].w[0];
        let owners: HashSet<usize> = (0..4096).map(|r| l.locate(w, r * 4096, None).0).collect();
        assert_eq!(owners.len(), 15);
        assert!(!owners.contains(&15));
        assert_eq!(l.locate(l.input, 7, None).0, 15);
    }

    #[test]
    fn locate_is_injective_per_vault() {
        let n = net(CNN);
        let l = plan_layout(&n, &small()).unwrap();
        for (t, info) in l.tensors.iter().enumerate() {
            let mut seen = HashSet::new();
            for idx in 0..info.len {
                for c in l.copies(t, idx) {
                    assert!(seen.insert(c), "{} collides at {idx}", info.name);
                    let (v, p) = c;
                    assert!(p >= l.bases[t][v] && p < l.vault_elems[v]);
                }
            }
        }
    }

    #[test]
    fn strips_overlap_by_kernel_radius() {
        let n = net("conv in_w=8 in_h=8 in_d=1 kernels=1 kw=3 kh=3\nloss fn=mse\ntrain batch=1 lr=0.1\n");
        let c = match n.layers[0].kind {
            LayerKind::Conv(c) => c,
            _ => unreachable!(),
        };
        // 64 output pixels over 4 PEs: 2 output rows each, plus a 2-row halo in padded space.
        let s = conv_strips(&c, 4);
        assert_eq!(s, vec![0..4, 2..6, 4..8, 6..10]);
    }

    #[test]
    fn lowering_blows_up_footprint() {
        let n = net("conv in_w=32 in_h=32 in_d=16 kernels=32 kw=3 kh=3\nloss fn=mse\ntrain batch=1 lr=0.1\n");
        let c = match n.layers[0].kind {
            LayerKind::Conv(c) => c,
            _ => unreachable!(),
        };
        let (x, xm) = lowered_footprint(&c);
        assert_eq!(x, 16 * 32 * 32);
        assert_eq!(xm, 32 * 32 * 9 * 16);
        assert!(xm > x);
    }

    #[test]
    fn capacity_error_names_vault() {
        let n = net("fc in=4096 out=4096\nloss fn=mse\ntrain batch=1 lr=0.1\n");
        let mut c = MachineConfig::hmc1();
        c.vault_capacity_bytes = 1 << 20;
        match plan_layout(&n, &c) {
            Err(CompileError::Capacity { vault, .. }) => assert!(vault < 15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gradients_land_on_producer() {
        let n = net(CNN);
        let l = plan_layout(&n, &small()).unwrap();
        let (dest, gate) = l.dx_dest(&n, 3);
        assert_eq!(dest.tensor, l.layers[2].dx_common.unwrap());
        assert!(gate.is_none());
        let (dest, gate) = l.dx_dest(&n, 2);
        assert_eq!(dest, l.layers[0].dz.unwrap());
        assert_eq!(gate.unwrap().0, LutFn::Relu);
        assert_eq!(l.dx_dest(&n, 0).0.tensor, l.dx_input);
    }
}
