//! Per-phase arithmetic shared by the reference engine and the simulator.
//!
//! Every tensor value is carried as an `f64`. In fixed modes values always sit
//! on the phase's Q-grid (or a coarser one), so conversion to raw integers is
//! exact and the integer arithmetic below is bit-exact.

use std::collections::BTreeMap;

use super::format::{FixedFormat, NumericMode};
use super::lut::{Lut, LutFn};
use super::round::Rounder;

/// Accumulator of a reduction: native float, or a double-width integer at
/// scale 2^(2*frac).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Acc {
    Float(f64),
    Wide(i128),
}

impl Acc {
    /// Merge a partial sum (bus merge-accumulate).
    pub fn merge(&mut self, other: Acc) {
        match (self, other) {
            (Acc::Float(a), Acc::Float(b)) => *a += b,
            (Acc::Wide(a), Acc::Wide(b)) => *a += b,
            _ => panic!("accumulator kinds differ"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhaseArith {
    mode: NumericMode,
    fmt: Option<FixedFormat>,
    rounder: Rounder,
    luts: BTreeMap<LutFn, Lut>,
    saturations: u64,
}

impl PhaseArith {
    pub fn new(mode: NumericMode, lanes: usize, seed: u32) -> Self {
        let fmt = mode.format();
        let luts = match fmt {
            Some(f) => [
                LutFn::Relu,
                LutFn::Tanh,
                LutFn::Sigmoid,
                LutFn::Exp,
                LutFn::Log,
                LutFn::ReluGrad,
                LutFn::TanhGrad,
                LutFn::SigmoidGrad,
                LutFn::Identity,
            ]
            .into_iter()
            .map(|func| (func, Lut::with_defaults(func, f)))
            .collect(),
            None => BTreeMap::new(),
        };
        Self {
            mode,
            fmt,
            rounder: Rounder::new(mode.round_mode(), lanes, seed),
            luts,
            saturations: 0,
        }
    }

    pub fn mode(&self) -> NumericMode {
        self.mode
    }

    pub fn format(&self) -> Option<FixedFormat> {
        self.fmt
    }

    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    pub fn roundings(&self) -> u64 {
        self.rounder.issued()
    }

    fn raw(f: FixedFormat, v: f64) -> i128 {
        debug_assert!(f.on_grid(v), "{v} is not on the {f} grid");
        f.raw(v) as i128
    }

    fn store(&mut self, f: FixedFormat, raw: i128) -> f64 {
        let (r, sat) = f.saturate(raw);
        self.saturations += sat as u64;
        f.value(r)
    }

    /// Host-side conversion of external data (round to nearest).
    pub fn quantize(&self, v: f64) -> f64 {
        match self.fmt {
            Some(f) => f.quantize(v),
            None => v,
        }
    }

    /// Reading a wider-format value into this phase's datapath (floor).
    pub fn narrow(&self, v: f64) -> f64 {
        match self.fmt {
            Some(f) => f.narrow(v),
            None => v,
        }
    }

    pub fn zero(&self) -> Acc {
        match self.fmt {
            Some(_) => Acc::Wide(0),
            None => Acc::Float(0.0),
        }
    }

    #[inline]
    pub fn mac(&self, acc: &mut Acc, a: f64, b: f64) {
        match (acc, self.fmt) {
            (Acc::Float(s), None) => *s += a * b,
            (Acc::Wide(s), Some(f)) => *s += Self::raw(f, a) * Self::raw(f, b),
            _ => panic!("accumulator does not match phase mode"),
        }
    }

    /// Round an accumulated sum (optionally averaged over `divisor`) to storage width.
    pub fn finish(&mut self, acc: Acc, divisor: u32) -> f64 {
        match (acc, self.fmt) {
            (Acc::Float(s), None) => {
                if divisor == 1 {
                    s
                } else {
                    s / divisor as f64
                }
            }
            (Acc::Wide(s), Some(f)) => {
                let den = (1i128 << f.frac()) * divisor as i128;
                let r = self.rounder.round(s, den);
                self.store(f, r)
            }
            _ => panic!("accumulator does not match phase mode"),
        }
    }

    pub fn mul(&mut self, a: f64, b: f64) -> f64 {
        match self.fmt {
            None => a * b,
            Some(f) => {
                let r = self.rounder.round(Self::raw(f, a) * Self::raw(f, b), 1i128 << f.frac());
                self.store(f, r)
            }
        }
    }

    pub fn add(&mut self, a: f64, b: f64) -> f64 {
        match self.fmt {
            None => a + b,
            Some(f) => {
                let r = Self::raw(f, a) + Self::raw(f, b);
                self.store(f, r)
            }
        }
    }

    pub fn sub(&mut self, a: f64, b: f64) -> f64 {
        match self.fmt {
            None => a - b,
            Some(f) => {
                let r = Self::raw(f, a) - Self::raw(f, b);
                self.store(f, r)
            }
        }
    }

    pub fn lut(&self, func: LutFn, x: f64) -> f64 {
        match self.fmt {
            None => func.eval_f64(x),
            Some(_) => self.luts[&func].eval(x),
        }
    }

    /// Natural log of a positive sum. The fixed path normalizes the argument
    /// into [1, 2) by powers of two before the table lookup.
    pub fn log_sum(&mut self, s: f64) -> f64 {
        match self.fmt {
            None => s.ln(),
            Some(f) => {
                if s <= 0.0 {
                    return self.store(f, f.min_raw() as i128);
                }
                let mut m = s;
                let mut e = 0i32;
                while m >= 2.0 {
                    m /= 2.0;
                    e += 1;
                }
                while m < 1.0 {
                    m *= 2.0;
                    e -= 1;
                }
                let base = self.luts[&LutFn::Log].eval(m);
                let ln2 = f.quantize(std::f64::consts::LN_2);
                let raw = Self::raw(f, base) + e as i128 * Self::raw(f, ln2);
                self.store(f, raw)
            }
        }
    }

    pub fn act(&self, func: LutFn, z: f64) -> f64 {
        self.lut(func, z)
    }

    /// dZ = dY * f'(Z), with f' expressed through the activation output.
    pub fn gate(&mut self, dy: f64, y: f64, func: LutFn) -> f64 {
        let g = match func {
            LutFn::Relu => LutFn::ReluGrad,
            LutFn::Tanh => LutFn::TanhGrad,
            LutFn::Sigmoid => LutFn::SigmoidGrad,
            LutFn::Identity => return dy,
            other => panic!("{other:?} is not an activation"),
        };
        let d = self.lut(g, y);
        self.mul(dy, d)
    }

    pub fn softmax(&mut self, logits: &[f64]) -> Vec<f64> {
        match self.fmt {
            None => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
            Some(_) => {
                let mut s = 0.0;
                for &v in logits {
                    let e = self.lut(LutFn::Exp, v);
                    s = self.add(s, e);
                }
                let l = self.log_sum(s);
                logits
                    .iter()
                    .map(|&v| {
                        let d = self.sub(v, l);
                        self.lut(LutFn::Exp, d)
                    })
                    .collect()
            }
        }
    }

    pub fn sgd(&mut self, w: f64, dw: f64, lr: f64) -> f64 {
        match self.fmt {
            None => w - lr * dw,
            Some(f) => {
                let lr_raw = f.raw(f.quantize(lr)) as i128;
                let num = (Self::raw(f, w) << f.frac()) - lr_raw * Self::raw(f, dw);
                let r = self.rounder.round(num, 1i128 << f.frac());
                self.store(f, r)
            }
        }
    }
}
