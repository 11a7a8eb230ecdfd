//! Layer kernels over logical tensors.
//!
//! Volumes are stored (depth, row, col, sample) with the sample index
//! innermost; matrices row-major; per-sample vectors (element, sample).

use std::ops::Range;

use crate::fxnum::{LutFn, PhaseArith};
use crate::netspec::LossKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolGeom {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
}

impl VolGeom {
    #[inline]
    pub fn idx(&self, d: usize, y: usize, x: usize, n: usize) -> usize {
        ((d * self.h + y) * self.w + x) * self.n + n
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Stride-1 convolution with "same" zero padding of radius `pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: VolGeom,
    pub kernels: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn padded(&self) -> VolGeom {
        VolGeom { h: self.input.h + 2 * self.pad, w: self.input.w + 2 * self.pad, ..self.input }
    }

    pub fn out(&self) -> VolGeom {
        VolGeom {
            d: self.kernels,
            h: self.input.h + 2 * self.pad + 1 - self.k,
            w: self.input.w + 2 * self.pad + 1 - self.k,
            n: self.input.n,
        }
    }

    #[inline]
    pub fn widx(&self, o: usize, d: usize, kh: usize, kw: usize) -> usize {
        ((o * self.input.d + d) * self.k + kh) * self.k + kw
    }

    pub fn weights(&self) -> usize {
        self.kernels * self.input.d * self.k * self.k
    }
}

pub fn add_pad(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (i, p, r) = (g.input, g.padded(), g.pad);
    let mut out = vec![0.0; p.len()];
    for d in 0..i.d {
        for y in 0..i.h {
            for xx in 0..i.w {
                for n in 0..i.n {
                    out[p.idx(d, y + r, xx + r, n)] = x[i.idx(d, y, xx, n)];
                }
            }
        }
    }
    out
}

pub fn remove_pad(xp: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (i, p, r) = (g.input, g.padded(), g.pad);
    let mut out = vec![0.0; i.len()];
    for d in 0..i.d {
        for y in 0..i.h {
            for xx in 0..i.w {
                for n in 0..i.n {
                    out[i.idx(d, y, xx, n)] = xp[p.idx(d, y + r, xx + r, n)];
                }
            }
        }
    }
    out
}

/// Y[o,y,x,n] = f(sum over (d, kh, kw) of Xp[d, y+kh, x+kw, n] * W[o,d,kh,kw]).
pub fn conv_ff(ar: &mut PhaseArith, xp: &[f64], w: &[f64], g: &ConvGeom, act: Option<LutFn>) -> Vec<f64> {
    let (p, o) = (g.padded(), g.out());
    let mut y = vec![0.0; o.len()];
    for k in 0..o.d {
        for yy in 0..o.h {
            for xx in 0..o.w {
                for n in 0..o.n {
                    let mut acc = ar.zero();
                    for d in 0..p.d {
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                ar.mac(&mut acc, xp[p.idx(d, yy + kh, xx + kw, n)], w[g.widx(k, d, kh, kw)]);
                            }
                        }
                    }
                    let v = ar.finish(acc, 1);
                    y[o.idx(k, yy, xx, n)] = match act {
                        Some(f) => ar.act(f, v),
                        None => v,
                    };
                }
            }
        }
    }
    y
}

/// dX[d,y,x,n] = sum over (o, kh, kw) of dYp[o, y+kh, x+kw, n] * W[o, d, K-1-kh, K-1-kw],
/// where dYp is dY zero-padded by the kernel radius.
pub fn conv_bp(ar: &mut PhaseArith, dy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (i, o, r, k) = (g.input, g.out(), g.pad, g.k);
    let mut dx = vec![0.0; i.len()];
    for d in 0..i.d {
        for yy in 0..i.h {
            for xx in 0..i.w {
                for n in 0..i.n {
                    let mut acc = ar.zero();
                    for oo in 0..o.d {
                        for kh in 0..k {
                            for kw in 0..k {
                                let (py, px) = (yy + kh, xx + kw);
                                let v = if py >= r && py < r + o.h && px >= r && px < r + o.w {
                                    dy[o.idx(oo, py - r, px - r, n)]
                                } else {
                                    0.0
                                };
                                ar.mac(&mut acc, v, w[g.widx(oo, d, k - 1 - kh, k - 1 - kw)]);
                            }
                        }
                    }
                    dx[i.idx(d, yy, xx, n)] = ar.finish(acc, 1);
                }
            }
        }
    }
    dx
}

/// dW[o,d,kh,kw] = (1/K) sum over splits of (sum over n, then output pixels in
/// the split, of dY[o,pix,n] * Xp[d, y+kh, x+kw, n]).
pub fn conv_up(
    ar: &mut PhaseArith,
    xp: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    splits: &[Range<usize>],
    divisor: u32,
) -> Vec<f64> {
    let (p, o) = (g.padded(), g.out());
    let mut dw = vec![0.0; g.weights()];
    for oo in 0..o.d {
        for d in 0..p.d {
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let mut total = ar.zero();
                    for s in splits.iter().filter(|s| !s.is_empty()) {
                        let mut part = ar.zero();
                        for n in 0..o.n {
                            for pix in s.clone() {
                                let (yy, xx) = (pix / o.w, pix % o.w);
                                ar.mac(&mut part, dy[o.idx(oo, yy, xx, n)], xp[p.idx(d, yy + kh, xx + kw, n)]);
                            }
                        }
                        total.merge(part);
                    }
                    dw[g.widx(oo, d, kh, kw)] = ar.finish(total, divisor);
                }
            }
        }
    }
    dw
}

/// Y[i,n] = f(sum_j W[i,j] X[j,n]) for a rows x cols weight and m columns of X.
pub fn fc_ff(
    ar: &mut PhaseArith,
    w: &[f64],
    x: &[f64],
    rows: usize,
    cols: usize,
    m: usize,
    act: Option<LutFn>,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * m];
    for i in 0..rows {
        for n in 0..m {
            let mut acc = ar.zero();
            for j in 0..cols {
                ar.mac(&mut acc, w[i * cols + j], x[j * m + n]);
            }
            let v = ar.finish(acc, 1);
            y[i * m + n] = match act {
                Some(f) => ar.act(f, v),
                None => v,
            };
        }
    }
    y
}

/// dX[j,n] = sum over row splits of (sum_{i in split} W[i,j] dY[i,n]).
pub fn fc_bp(
    ar: &mut PhaseArith,
    w: &[f64],
    dy: &[f64],
    rows: usize,
    cols: usize,
    m: usize,
    splits: &[Range<usize>],
) -> Vec<f64> {
    debug_assert_eq!(splits.last().map(|s| s.end), Some(rows));
    let mut dx = vec![0.0; cols * m];
    for j in 0..cols {
        for n in 0..m {
            let mut total = ar.zero();
            for s in splits.iter().filter(|s| !s.is_empty()) {
                let mut part = ar.zero();
                for i in s.clone() {
                    ar.mac(&mut part, w[i * cols + j], dy[i * m + n]);
                }
                total.merge(part);
            }
            dx[j * m + n] = ar.finish(total, 1);
        }
    }
    dx
}

/// dW[i,j] = (1/K) sum_c dY[i,c] X[j,c] over m columns.
pub fn fc_up(ar: &mut PhaseArith, dy: &[f64], x: &[f64], rows: usize, cols: usize, m: usize, divisor: u32) -> Vec<f64> {
    let mut dw = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = ar.zero();
            for c in 0..m {
                ar.mac(&mut acc, dy[i * m + c], x[j * m + c]);
            }
            dw[i * cols + j] = ar.finish(acc, divisor);
        }
    }
    dw
}

/// Window max over r x r blocks; IDs are window-local positions ky*r + kx.
pub fn pool_ff(x: &[f64], g: &VolGeom, r: usize) -> (Vec<f64>, Vec<u32>) {
    let o = VolGeom { h: g.h / r, w: g.w / r, ..*g };
    let mut y = vec![0.0; o.len()];
    let mut ids = vec![0u32; o.len()];
    for d in 0..o.d {
        for yy in 0..o.h {
            for xx in 0..o.w {
                for n in 0..o.n {
                    let mut best = x[g.idx(d, yy * r, xx * r, n)];
                    let mut id = 0u32;
                    for ky in 0..r {
                        for kx in 0..r {
                            let v = x[g.idx(d, yy * r + ky, xx * r + kx, n)];
                            if v > best {
                                best = v;
                                id = (ky * r + kx) as u32;
                            }
                        }
                    }
                    y[o.idx(d, yy, xx, n)] = best;
                    ids[o.idx(d, yy, xx, n)] = id;
                }
            }
        }
    }
    (y, ids)
}

pub fn pool_bp(dy: &[f64], ids: &[u32], g: &VolGeom, r: usize) -> Vec<f64> {
    let o = VolGeom { h: g.h / r, w: g.w / r, ..*g };
    let mut dx = vec![0.0; g.len()];
    for d in 0..o.d {
        for yy in 0..o.h {
            for xx in 0..o.w {
                for n in 0..o.n {
                    let id = ids[o.idx(d, yy, xx, n)] as usize;
                    dx[g.idx(d, yy * r + id / r, xx * r + id % r, n)] = dy[o.idx(d, yy, xx, n)];
                }
            }
        }
    }
    dx
}

/// Gradient of the loss at the network output for one batch.
/// `y` and `target` are (class, sample); labels index classes.
pub fn loss_grad(ar: &mut PhaseArith, kind: LossKind, y: &[f64], target: &crate::goldref::Target, c: usize, m: usize) -> Vec<f64> {
    let mut dy = vec![0.0; c * m];
    for n in 0..m {
        match (kind, target) {
            (LossKind::Mse, crate::goldref::Target::Values(t)) => {
                for j in 0..c {
                    let tv = ar.quantize(t[j * m + n]);
                    dy[j * m + n] = ar.sub(y[j * m + n], tv);
                }
            }
            (LossKind::Mse, crate::goldref::Target::Labels(l)) => {
                for j in 0..c {
                    let tv = if l[n] == j { 1.0 } else { 0.0 };
                    dy[j * m + n] = ar.sub(y[j * m + n], tv);
                }
            }
            (LossKind::SoftmaxCe, crate::goldref::Target::Labels(l)) => {
                let logits: Vec<f64> = (0..c).map(|j| y[j * m + n]).collect();
                let p = ar.softmax(&logits);
                for j in 0..c {
                    let oh = if l[n] == j { 1.0 } else { 0.0 };
                    dy[j * m + n] = ar.sub(p[j], oh);
                }
            }
            (LossKind::SoftmaxCe, crate::goldref::Target::Values(_)) => {
                panic!("softmax cross-entropy needs class labels")
            }
        }
    }
    dy
}

/// Host-side loss value (float) averaged over the batch.
pub fn loss_value(kind: LossKind, y: &[f64], target: &crate::goldref::Target, c: usize, m: usize) -> f64 {
    let mut total = 0.0;
    for n in 0..m {
        match (kind, target) {
            (LossKind::Mse, t) => {
                for j in 0..c {
                    let d = y[j * m + n] - t.value(j, n, m);
                    total += 0.5 * d * d;
                }
            }
            (LossKind::SoftmaxCe, crate::goldref::Target::Labels(l)) => {
                let mx = (0..c).map(|j| y[j * m + n]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..c).map(|j| (y[j * m + n] - mx).exp()).sum();
                total += -(y[l[n] * m + n] - mx - s.ln());
            }
            (LossKind::SoftmaxCe, crate::goldref::Target::Values(_)) => {
                panic!("softmax cross-entropy needs class labels")
            }
        }
    }
    total / m as f64
}

pub fn gru_combine(ar: &mut PhaseArith, n: f64, z: f64, h: f64) -> f64 {
    let hn = ar.sub(h, n);
    let zh = ar.mul(z, hn);
    ar.add(n, zh)
}

/// Returns (dn_pre, dz_pre, dh_direct).
pub fn gru_combine_grad(ar: &mut PhaseArith, dh: f64, z: f64, n: f64, h: f64) -> (f64, f64, f64) {
    let one_z = ar.sub(1.0, z);
    let dn = ar.mul(dh, one_z);
    let dn_pre = ar.gate(dn, n, LutFn::Tanh);
    let hn = ar.sub(h, n);
    let dz = ar.mul(dh, hn);
    let dz_pre = ar.gate(dz, z, LutFn::Sigmoid);
    let dh_direct = ar.mul(dh, z);
    (dn_pre, dz_pre, dh_direct)
}

/// Returns (dr_pre, dh through r*h).
pub fn gru_reset_grad(ar: &mut PhaseArith, drh: f64, r: f64, h: f64) -> (f64, f64) {
    let dr = ar.mul(drh, h);
    let dr_pre = ar.gate(dr, r, LutFn::Sigmoid);
    (dr_pre, ar.mul(drh, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxnum::NumericMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn float() -> PhaseArith {
        PhaseArith::new(NumericMode::Float, 32, 1)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn degenerate_conv() {
        let g = ConvGeom { input: VolGeom { d: 1, h: 1, w: 1, n: 1 }, kernels: 1, k: 1, pad: 0 };
        let y = conv_ff(&mut float(), &[3.0], &[0.5], &g, None);
        assert_eq!(y, vec![1.5]);
    }

    #[test]
    fn identity_fc() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        assert_eq!(fc_ff(&mut float(), &w, &x, 3, 3, 2, None), x);
    }

    /// Straight 6-deep loop nest over the unpadded input.
    fn brute_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (i, o) = (g.input, g.out());
        let mut y = vec![0.0; o.len()];
        for k in 0..o.d {
            for yy in 0..o.h {
                for xx in 0..o.w {
                    for n in 0..o.n {
                        let mut s = 0.0;
                        for d in 0..i.d {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let sy = yy as isize + kh as isize - g.pad as isize;
                                    let sx = xx as isize + kw as isize - g.pad as isize;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < i.h && (sx as usize) < i.w {
                                        s += x[i.idx(d, sy as usize, sx as usize, n)] * w[g.widx(k, d, kh, kw)];
                                    }
                                }
                            }
                        }
                        y[o.idx(k, yy, xx, n)] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom { input: VolGeom { d: 2, h: 6, w: 6, n: 2 }, kernels: 3, k: 3, pad: 1 };
        let x = rand_vec(&mut rng, g.input.len());
        let w = rand_vec(&mut rng, g.weights());
        let y = conv_ff(&mut float(), &add_pad(&x, &g), &w, &g, None);
        let b = brute_conv(&x, &w, &g);
        for (a, b) in y.iter().zip(&b) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_bp_is_transposed_ff() {
        // <conv(x), dy> == <x, conv_bp(dy)> for the linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom { input: VolGeom { d: 3, h: 5, w: 4, n: 2 }, kernels: 2, k: 3, pad: 1 };
        let x = rand_vec(&mut rng, g.input.len());
        let w = rand_vec(&mut rng, g.weights());
        let dy = rand_vec(&mut rng, g.out().len());
        let y = conv_ff(&mut float(), &add_pad(&x, &g), &w, &g, None);
        let dx = conv_bp(&mut float(), &dy, &w, &g);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn fc_bp_equals_ff_with_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, cols, m) = (5, 4, 3);
        let w = rand_vec(&mut rng, rows * cols);
        let dy = rand_vec(&mut rng, rows * m);
        let mut wt = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                wt[j * rows + i] = w[i * cols + j];
            }
        }
        let a = fc_bp(&mut float(), &w, &dy, rows, cols, m, &[0..rows]);
        let b = fc_ff(&mut float(), &wt, &dy, cols, rows, m, None);
        assert_eq!(a, b);
    }

    #[test]
    fn outer_product_by_hand() {
        let dw = fc_up(&mut float(), &[3.0], &[1.0, 2.0], 1, 2, 1, 1);
        assert_eq!(dw, vec![3.0, 6.0]);
    }

    /// dW via an explicitly lowered X_M (pixels x D*K*K) times dY.
    fn lowered_dw(xp: &[f64], dy: &[f64], g: &ConvGeom, splits: &[Range<usize>], k_div: f64) -> Vec<f64> {
        let (p, o) = (g.padded(), g.out());
        let cols = p.d * g.k * g.k;
        let mut dw = vec![0.0; g.weights()];
        for oo in 0..o.d {
            for c in 0..cols {
                let (d, kh, kw) = (c / (g.k * g.k), c / g.k % g.k, c % g.k);
                let mut total = 0.0;
                for s in splits.iter().filter(|s| !s.is_empty()) {
                    let mut part = 0.0;
                    for n in 0..o.n {
                        let xm: Vec<f64> = s
                            .clone()
                            .map(|pix| xp[p.idx(d, pix / o.w + kh, pix % o.w + kw, n)])
                            .collect();
                        for (pix, v) in s.clone().zip(xm) {
                            part += dy[o.idx(oo, pix / o.w, pix % o.w, n)] * v;
                        }
                    }
                    total += part;
                }
                dw[oo * cols + c] = total / k_div;
            }
        }
        dw
    }

    #[test]
    fn conv_up_matches_lowering() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = ConvGeom { input: VolGeom { d: 2, h: 5, w: 5, n: 3 }, kernels: 2, k: 3, pad: 1 };
        let xp = add_pad(&rand_vec(&mut rng, g.input.len()), &g);
        let dy = rand_vec(&mut rng, g.out().len());
        let splits = crate::partition::ranges(25, 4);
        let a = conv_up(&mut float(), &xp, &dy, &g, &splits, 3);
        assert_eq!(a, lowered_dw(&xp, &dy, &g, &splits, 3.0));
    }

    #[test]
    fn conv_up_two_samples_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeom { input: VolGeom { d: 1, h: 4, w: 4, n: 2 }, kernels: 1, k: 3, pad: 1 };
        let x = rand_vec(&mut rng, g.input.len());
        let dy = rand_vec(&mut rng, g.out().len());
        let full = conv_up(&mut float(), &add_pad(&x, &g), &dy, &g, &[0..16], 2);
        let single = |s: usize| {
            let g1 = ConvGeom { input: VolGeom { n: 1, ..g.input }, ..g };
            let xs: Vec<f64> = x.iter().skip(s).step_by(2).copied().collect();
            let ds: Vec<f64> = dy.iter().skip(s).step_by(2).copied().collect();
            conv_up(&mut float(), &add_pad(&xs, &g1), &ds, &g1, &[0..16], 1)
        };
        let (d0, d1) = (single(0), single(1));
        for i in 0..full.len() {
            assert!((full[i] - (d0[i] + d1[i]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_routes_and_conserves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = VolGeom { d: 2, h: 4, w: 6, n: 3 };
        let x = rand_vec(&mut rng, g.len());
        let (y, ids) = pool_ff(&x, &g, 2);
        assert!(ids.iter().all(|&i| i < 4));
        let dy = rand_vec(&mut rng, y.len());
        let dx = pool_bp(&dy, &ids, &g, 2);
        let a: f64 = dx.iter().sum();
        let b: f64 = dy.iter().sum();
        assert!((a - b).abs() < 1e-12);
        let xs = [3.0, 1.0, 4.0, 1.0];
        let g1 = VolGeom { d: 1, h: 2, w: 2, n: 1 };
        assert_eq!(pool_ff(&xs, &g1, 2), (vec![4.0], vec![2]));
    }

    #[test]
    fn softmax_symmetric_logits() {
        let t = crate::goldref::Target::Labels(vec![0]);
        let dy = loss_grad(&mut float(), LossKind::SoftmaxCe, &[0.0, 0.0], &t, 2, 1);
        assert_eq!(dy, vec![-0.5, 0.5]);
        let t = crate::goldref::Target::Values(vec![0.25, 0.5]);
        assert_eq!(loss_grad(&mut float(), LossKind::Mse, &[0.25, 0.5], &t, 2, 1), vec![0.0, 0.0]);
    }

    #[test]
    fn pad_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ConvGeom { input: VolGeom { d: 2, h: 3, w: 4, n: 2 }, kernels: 1, k: 5, pad: 2 };
        let x = rand_vec(&mut rng, g.input.len());
        assert_eq!(remove_pad(&add_pad(&x, &g), &g), x);
    }
}
