//! Minibatch forward / backward / update over a whole network.

use crate::fxnum::{LutFn, PhaseArith};
use crate::netspec::{CellKind, ConvSpec, LayerKind, NetworkSpec, Shape};
use crate::partition::ranges;
use crate::seed;

use super::ops::{self, ConvGeom, VolGeom};
use super::{Batch, Params, Target};

/// Unrolled recurrent state. Time-indexed matrices have rows = hidden units
/// and columns (t, sample), sample innermost.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellState {
    /// h_0 .. h_T, H x (T+1)N.
    pub hs: Vec<f64>,
    /// [x_t; h_t] per step, (I+H) x TN.
    pub u: Vec<f64>,
    /// GRU only: gates and [x_t; r*h_t].
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub rh: Vec<f64>,
    pub n: Vec<f64>,
    pub un: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellGrads {
    /// Pre-activation gradients per gate (Elman uses `dz` only), H x TN.
    pub dz: Vec<f64>,
    pub dr: Vec<f64>,
    pub dn: Vec<f64>,
    /// GRU state gradients dh_0 .. dh_T, H x (T+1)N.
    pub dh: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub input: Vec<f64>,
    /// Per layer output after any fused activation; empty for activation and loss layers.
    pub outputs: Vec<Vec<f64>>,
    /// Zero-padded conv inputs.
    pub padded: Vec<Vec<f64>>,
    pub pool_ids: Vec<Vec<u32>>,
    pub cells: Vec<CellState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backward {
    /// Gradient w.r.t. each layer's pre-activation output.
    pub dz: Vec<Vec<f64>>,
    pub dx_input: Vec<f64>,
    pub cells: Vec<CellGrads>,
}

/// Nonlinearity whose derivative gates the gradient arriving at layer `p`'s output.
pub fn out_gate(net: &NetworkSpec, p: usize) -> Option<LutFn> {
    if let Some(a) = net.activation_after(p) {
        return Some(a.lut());
    }
    match net.layers[p].kind {
        LayerKind::Recurrent { cell: CellKind::Elman, .. } => Some(LutFn::Tanh),
        _ => None,
    }
}

pub fn conv_geom(c: &ConvSpec, n: usize) -> ConvGeom {
    ConvGeom {
        input: VolGeom { d: c.in_d, h: c.in_h, w: c.in_w, n },
        kernels: c.kernels,
        k: c.kw,
        pad: c.pad,
    }
}

pub fn vol_geom(s: Shape, n: usize) -> VolGeom {
    match s {
        Shape::Volume { d, h, w } => VolGeom { d, h, w, n },
        Shape::Vector(len) => VolGeom { d: len, h: 1, w: 1, n },
    }
}

pub struct Engine<'a> {
    net: &'a NetworkSpec,
    pes: usize,
    pub ff: PhaseArith,
    pub bp: PhaseArith,
    pub up: PhaseArith,
}

impl<'a> Engine<'a> {
    /// `pes` fixes how cross-PE reductions are split, so float sums follow
    /// the accelerator's order.
    pub fn new(net: &'a NetworkSpec, pes: usize, lanes: usize, seed: u64) -> Self {
        let s = seed::rounding_seeds(seed);
        Self {
            net,
            pes,
            ff: PhaseArith::new(net.train.ff, lanes, s[0]),
            bp: PhaseArith::new(net.train.bp, lanes, s[1]),
            up: PhaseArith::new(net.train.up, lanes, s[2]),
        }
    }

    fn batch(&self) -> usize {
        self.net.train.batch
    }

    fn narrow(ar: &PhaseArith, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| ar.narrow(x)).collect()
    }

    pub fn forward(&mut self, params: &Params, x: &[f64]) -> Forward {
        let net = self.net;
        let m = self.batch();
        let n_layers = net.layers.len();
        let mut f = Forward {
            input: x.iter().map(|&v| self.ff.quantize(v)).collect(),
            outputs: vec![Vec::new(); n_layers],
            padded: vec![Vec::new(); n_layers],
            pool_ids: vec![Vec::new(); n_layers],
            cells: vec![CellState::default(); n_layers],
        };
        for (i, l) in net.layers.iter().enumerate() {
            let act = net.activation_after(i).map(|a| a.lut());
            let xin = match net.producer(i) {
                Some(p) => f.outputs[p].clone(),
                None => f.input.clone(),
            };
            match l.kind {
                LayerKind::Conv(c) => {
                    let g = conv_geom(&c, m);
                    let xp = ops::add_pad(&xin, &g);
                    let w = Self::narrow(&self.ff, &params.layers[i][0]);
                    f.outputs[i] = ops::conv_ff(&mut self.ff, &xp, &w, &g, act);
                    f.padded[i] = xp;
                }
                LayerKind::MaxPool { radius } => {
                    let (y, ids) = ops::pool_ff(&xin, &vol_geom(l.input, m), radius);
                    f.outputs[i] = y;
                    f.pool_ids[i] = ids;
                }
                LayerKind::Fc { input, output } => {
                    let w = Self::narrow(&self.ff, &params.layers[i][0]);
                    f.outputs[i] = ops::fc_ff(&mut self.ff, &w, &xin, output, input, m, act);
                }
                LayerKind::Recurrent { input, hidden, steps, cell } => {
                    let ws: Vec<Vec<f64>> = params.layers[i].iter().map(|w| Self::narrow(&self.ff, w)).collect();
                    let st = self.cell_forward(&ws, &xin, input, hidden, steps, cell);
                    let tn1 = (steps + 1) * m;
                    let mut out = vec![0.0; hidden * m];
                    for h in 0..hidden {
                        out[h * m..(h + 1) * m].copy_from_slice(&st.hs[h * tn1 + steps * m..h * tn1 + tn1]);
                    }
                    f.outputs[i] = out;
                    f.cells[i] = st;
                }
                LayerKind::Activation(_) | LayerKind::Loss(_) => {}
            }
        }
        f
    }

    fn cell_forward(
        &mut self,
        ws: &[Vec<f64>],
        x: &[f64],
        ni: usize,
        nh: usize,
        steps: usize,
        cell: CellKind,
    ) -> CellState {
        let m = self.batch();
        let (tn, tn1, cols) = (steps * m, (steps + 1) * m, ni + nh);
        let mut st = CellState { hs: vec![0.0; nh * tn1], u: vec![0.0; cols * tn], ..Default::default() };
        if cell == CellKind::Gru {
            st.z = vec![0.0; nh * tn];
            st.r = vec![0.0; nh * tn];
            st.rh = vec![0.0; nh * tn];
            st.n = vec![0.0; nh * tn];
            st.un = vec![0.0; cols * tn];
        }
        for t in 0..steps {
            let mut ub = vec![0.0; cols * m];
            for n in 0..m {
                for j in 0..ni {
                    ub[j * m + n] = x[(t * ni + j) * m + n];
                }
                for h in 0..nh {
                    ub[(ni + h) * m + n] = st.hs[h * tn1 + t * m + n];
                }
            }
            for j in 0..cols {
                st.u[j * tn + t * m..j * tn + t * m + m].copy_from_slice(&ub[j * m..j * m + m]);
            }
            let hnext = match cell {
                CellKind::Elman => ops::fc_ff(&mut self.ff, &ws[0], &ub, nh, cols, m, Some(LutFn::Tanh)),
                CellKind::Gru => {
                    let z = ops::fc_ff(&mut self.ff, &ws[0], &ub, nh, cols, m, Some(LutFn::Sigmoid));
                    let r = ops::fc_ff(&mut self.ff, &ws[1], &ub, nh, cols, m, Some(LutFn::Sigmoid));
                    let mut un = ub.clone();
                    let mut rh = vec![0.0; nh * m];
                    for e in 0..nh * m {
                        rh[e] = self.ff.mul(r[e], ub[ni * m + e]);
                        un[ni * m + e] = rh[e];
                    }
                    let nn = ops::fc_ff(&mut self.ff, &ws[2], &un, nh, cols, m, Some(LutFn::Tanh));
                    let mut hn = vec![0.0; nh * m];
                    for e in 0..nh * m {
                        hn[e] = ops::gru_combine(&mut self.ff, nn[e], z[e], ub[ni * m + e]);
                    }
                    for h in 0..nh {
                        let dst = h * tn + t * m;
                        st.z[dst..dst + m].copy_from_slice(&z[h * m..h * m + m]);
                        st.r[dst..dst + m].copy_from_slice(&r[h * m..h * m + m]);
                        st.rh[dst..dst + m].copy_from_slice(&rh[h * m..h * m + m]);
                        st.n[dst..dst + m].copy_from_slice(&nn[h * m..h * m + m]);
                    }
                    for j in 0..cols {
                        st.un[j * tn + t * m..j * tn + t * m + m].copy_from_slice(&un[j * m..j * m + m]);
                    }
                    hn
                }
            };
            for h in 0..nh {
                let dst = h * tn1 + (t + 1) * m;
                st.hs[dst..dst + m].copy_from_slice(&hnext[h * m..h * m + m]);
            }
        }
        st
    }

    fn gate(&mut self, v: Vec<f64>, p: usize, fwd: &Forward) -> Vec<f64> {
        match out_gate(self.net, p) {
            None => v,
            Some(f) => v
                .iter()
                .zip(&fwd.outputs[p])
                .map(|(&d, &y)| {
                    let y = self.bp.narrow(y);
                    self.bp.gate(d, y, f)
                })
                .collect(),
        }
    }

    pub fn output<'f>(&self, fwd: &'f Forward) -> &'f [f64] {
        let p = self.net.producer(self.net.layers.len() - 1).expect("loss has a producer");
        &fwd.outputs[p]
    }

    pub fn loss(&self, fwd: &Forward, target: &Target) -> f64 {
        let m = self.batch();
        let y = self.output(fwd);
        ops::loss_value(self.net.loss(), y, target, y.len() / m, m)
    }

    pub fn backward(&mut self, params: &Params, fwd: &Forward, target: &Target) -> Backward {
        let net = self.net;
        let m = self.batch();
        let n_layers = net.layers.len();
        let mut b = Backward {
            dz: vec![Vec::new(); n_layers],
            dx_input: Vec::new(),
            cells: vec![CellGrads::default(); n_layers],
        };
        let p = net.producer(n_layers - 1).expect("loss has a producer");
        let y = Self::narrow(&self.bp, &fwd.outputs[p]);
        let dy = ops::loss_grad(&mut self.bp, net.loss(), &y, target, y.len() / m, m);
        b.dz[p] = self.gate(dy, p, fwd);

        for i in (0..n_layers).rev() {
            let l = net.layers[i];
            let dzi = b.dz[i].clone();
            let dx = match l.kind {
                LayerKind::Conv(c) => {
                    let w = Self::narrow(&self.bp, &params.layers[i][0]);
                    ops::conv_bp(&mut self.bp, &dzi, &w, &conv_geom(&c, m))
                }
                LayerKind::MaxPool { radius } => ops::pool_bp(&dzi, &fwd.pool_ids[i], &vol_geom(l.input, m), radius),
                LayerKind::Fc { input, output } => {
                    let w = Self::narrow(&self.bp, &params.layers[i][0]);
                    ops::fc_bp(&mut self.bp, &w, &dzi, output, input, m, &ranges(output, self.pes))
                }
                LayerKind::Recurrent { input, hidden, steps, cell } => {
                    let ws: Vec<Vec<f64>> = params.layers[i].iter().map(|w| Self::narrow(&self.bp, w)).collect();
                    let (dx, cg) = self.cell_backward(&ws, &fwd.cells[i], &dzi, input, hidden, steps, cell);
                    b.cells[i] = cg;
                    dx
                }
                LayerKind::Activation(_) | LayerKind::Loss(_) => continue,
            };
            match net.producer(i) {
                Some(p) => b.dz[p] = self.gate(dx, p, fwd),
                None => b.dx_input = dx,
            }
        }
        b
    }

    #[allow(clippy::too_many_arguments)]
    fn cell_backward(
        &mut self,
        ws: &[Vec<f64>],
        st: &CellState,
        dout: &[f64],
        ni: usize,
        nh: usize,
        steps: usize,
        cell: CellKind,
    ) -> (Vec<f64>, CellGrads) {
        let m = self.batch();
        let (tn, tn1, cols) = (steps * m, (steps + 1) * m, ni + nh);
        let splits = ranges(nh, self.pes);
        let mut dx = vec![0.0; ni * steps * m];
        let col = |h: usize, t: usize, n: usize| h * tn + t * m + n;
        let hcol = |h: usize, t: usize, n: usize| h * tn1 + t * m + n;
        let block = |v: &[f64], t: usize| -> Vec<f64> {
            let mut b = vec![0.0; nh * m];
            for h in 0..nh {
                b[h * m..h * m + m].copy_from_slice(&v[h * tn + t * m..h * tn + t * m + m]);
            }
            b
        };
        let mut g = CellGrads::default();
        match cell {
            CellKind::Elman => {
                g.dz = vec![0.0; nh * tn];
                for h in 0..nh {
                    for n in 0..m {
                        g.dz[col(h, steps - 1, n)] = dout[h * m + n];
                    }
                }
                for t in (0..steps).rev() {
                    let du = ops::fc_bp(&mut self.bp, &ws[0], &block(&g.dz, t), nh, cols, m, &splits);
                    for j in 0..ni {
                        for n in 0..m {
                            dx[(t * ni + j) * m + n] = du[j * m + n];
                        }
                    }
                    if t > 0 {
                        for h in 0..nh {
                            for n in 0..m {
                                let y = self.bp.narrow(st.hs[hcol(h, t, n)]);
                                g.dz[col(h, t - 1, n)] = self.bp.gate(du[(ni + h) * m + n], y, LutFn::Tanh);
                            }
                        }
                    }
                }
            }
            CellKind::Gru => {
                g.dz = vec![0.0; nh * tn];
                g.dr = vec![0.0; nh * tn];
                g.dn = vec![0.0; nh * tn];
                g.dh = vec![0.0; nh * tn1];
                for h in 0..nh {
                    for n in 0..m {
                        g.dh[hcol(h, steps, n)] = dout[h * m + n];
                    }
                }
                for t in (0..steps).rev() {
                    let mut dh_dir = vec![0.0; nh * m];
                    for h in 0..nh {
                        for n in 0..m {
                            let bp = &mut self.bp;
                            let (z, nn, hv) = (
                                bp.narrow(st.z[col(h, t, n)]),
                                bp.narrow(st.n[col(h, t, n)]),
                                bp.narrow(st.hs[hcol(h, t, n)]),
                            );
                            let (dn, dz, dd) = ops::gru_combine_grad(bp, g.dh[hcol(h, t + 1, n)], z, nn, hv);
                            g.dn[col(h, t, n)] = dn;
                            g.dz[col(h, t, n)] = dz;
                            dh_dir[h * m + n] = dd;
                        }
                    }
                    let dun = ops::fc_bp(&mut self.bp, &ws[2], &block(&g.dn, t), nh, cols, m, &splits);
                    let mut dh_r = vec![0.0; nh * m];
                    for h in 0..nh {
                        for n in 0..m {
                            let r = self.bp.narrow(st.r[col(h, t, n)]);
                            let hv = self.bp.narrow(st.hs[hcol(h, t, n)]);
                            let (dr, dhr) = ops::gru_reset_grad(&mut self.bp, dun[(ni + h) * m + n], r, hv);
                            g.dr[col(h, t, n)] = dr;
                            dh_r[h * m + n] = dhr;
                        }
                    }
                    let dur = ops::fc_bp(&mut self.bp, &ws[1], &block(&g.dr, t), nh, cols, m, &splits);
                    let duz = ops::fc_bp(&mut self.bp, &ws[0], &block(&g.dz, t), nh, cols, m, &splits);
                    let bp = &mut self.bp;
                    for j in 0..ni {
                        for n in 0..m {
                            let e = j * m + n;
                            let s = bp.add(dun[e], dur[e]);
                            dx[(t * ni + j) * m + n] = bp.add(s, duz[e]);
                        }
                    }
                    for h in 0..nh {
                        for n in 0..m {
                            let e = (ni + h) * m + n;
                            let s = bp.add(dh_dir[h * m + n], dh_r[h * m + n]);
                            let s = bp.add(s, dur[e]);
                            g.dh[hcol(h, t, n)] = bp.add(s, duz[e]);
                        }
                    }
                }
            }
        }
        (dx, g)
    }

    pub fn weight_grads(&mut self, fwd: &Forward, bwd: &Backward) -> Vec<Vec<Vec<f64>>> {
        let net = self.net;
        let m = self.batch();
        let k = m as u32;
        let mut out = vec![Vec::new(); net.layers.len()];
        for (i, l) in net.layers.iter().enumerate() {
            let up = &mut self.up;
            match l.kind {
                LayerKind::Conv(c) => {
                    let g = conv_geom(&c, m);
                    let xp = Self::narrow(up, &fwd.padded[i]);
                    let dz = Self::narrow(up, &bwd.dz[i]);
                    let splits = ranges(g.out().plane(), self.pes);
                    out[i] = vec![ops::conv_up(up, &xp, &dz, &g, &splits, k)];
                }
                LayerKind::Fc { input, output } => {
                    let x = match net.producer(i) {
                        Some(p) => &fwd.outputs[p],
                        None => &fwd.input,
                    };
                    let x = Self::narrow(up, x);
                    let dz = Self::narrow(up, &bwd.dz[i]);
                    out[i] = vec![ops::fc_up(up, &dz, &x, output, input, m, k)];
                }
                LayerKind::Recurrent { input, hidden, steps, cell } => {
                    let (st, cg) = (&fwd.cells[i], &bwd.cells[i]);
                    let cols = input + hidden;
                    let tn = steps * m;
                    let u = Self::narrow(up, &st.u);
                    out[i] = match cell {
                        CellKind::Elman => {
                            vec![ops::fc_up(up, &Self::narrow(up, &cg.dz), &u, hidden, cols, tn, k)]
                        }
                        CellKind::Gru => {
                            let un = Self::narrow(up, &st.un);
                            vec![
                                ops::fc_up(up, &Self::narrow(up, &cg.dz), &u, hidden, cols, tn, k),
                                ops::fc_up(up, &Self::narrow(up, &cg.dr), &u, hidden, cols, tn, k),
                                ops::fc_up(up, &Self::narrow(up, &cg.dn), &un, hidden, cols, tn, k),
                            ]
                        }
                    };
                }
                _ => {}
            }
        }
        out
    }

    pub fn sgd(&mut self, params: &Params, grads: &[Vec<Vec<f64>>]) -> Params {
        let lr = self.net.train.lr;
        let layers = params
            .layers
            .iter()
            .zip(grads)
            .map(|(ws, gs)| {
                ws.iter()
                    .zip(gs)
                    .map(|(w, g)| w.iter().zip(g).map(|(&w, &d)| self.up.sgd(w, d, lr)).collect())
                    .collect()
            })
            .collect();
        Params { layers }
    }

    /// One minibatch: forward, loss, backward, weight gradients, SGD. Returns the
    /// updated weights and the loss before the update.
    pub fn train_step(&mut self, params: &Params, batch: &Batch) -> (Params, f64) {
        let fwd = self.forward(params, &batch.x);
        let loss = self.loss(&fwd, &batch.target);
        let bwd = self.backward(params, &fwd, &batch.target);
        let grads = self.weight_grads(&fwd, &bwd);
        (self.sgd(params, &grads), loss)
    }

    /// Fraction of samples whose arg-max output matches the label.
    pub fn accuracy(&mut self, params: &Params, batch: &Batch) -> f64 {
        let fwd = self.forward(params, &batch.x);
        let y = self.output(&fwd);
        let m = batch.size;
        let c = y.len() / m;
        let labels = match &batch.target {
            Target::Labels(l) => l,
            Target::Values(_) => return f64::NAN,
        };
        let hits = (0..m)
            .filter(|&n| {
                let best = (0..c)
                    .max_by(|&a, &b| y[a * m + n].partial_cmp(&y[b * m + n]).unwrap().then(b.cmp(&a)))
                    .unwrap();
                best == labels[n]
            })
            .count();
        hits as f64 / m as f64
    }
}
