//! Look-up tables for activation functions, their derivatives, and the
//! exponential/logarithm used by the softmax cross-entropy path.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::format::FixedFormat;
use super::FxError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LutFn {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    /// Derivative of ReLU expressed through the activation output.
    ReluGrad,
    /// 1 - y^2, indexed by the tanh output y.
    TanhGrad,
    /// y (1 - y), indexed by the sigmoid output y.
    SigmoidGrad,
}

impl LutFn {
    pub fn eval_f64(&self, x: f64) -> f64 {
        match self {
            LutFn::Identity => x,
            LutFn::Relu => x.max(0.0),
            LutFn::Tanh => x.tanh(),
            LutFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            LutFn::Exp => x.exp(),
            LutFn::Log => x.ln(),
            LutFn::ReluGrad => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LutFn::TanhGrad => 1.0 - x * x,
            LutFn::SigmoidGrad => x * (1.0 - x),
        }
    }

    /// Piecewise-linear functions with integer breakpoints are realized by a
    /// sign test rather than a table.
    pub fn is_exact(&self) -> bool {
        matches!(self, LutFn::Identity | LutFn::Relu | LutFn::ReluGrad)
    }

    pub fn default_range(&self) -> (f64, f64) {
        match self {
            LutFn::Tanh | LutFn::Sigmoid => (-4.0, 4.0),
            LutFn::Exp => (-8.0, 8.0),
            LutFn::Log => (1.0 / 65536.0, 8.0),
            LutFn::TanhGrad => (-1.0, 1.0),
            LutFn::SigmoidGrad => (0.0, 1.0),
            LutFn::Identity | LutFn::Relu | LutFn::ReluGrad => (-8.0, 8.0),
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            LutFn::Identity => 0,
            LutFn::Relu => 1,
            LutFn::Tanh => 2,
            LutFn::Sigmoid => 3,
            LutFn::Exp => 4,
            LutFn::Log => 5,
            LutFn::ReluGrad => 6,
            LutFn::TanhGrad => 7,
            LutFn::SigmoidGrad => 8,
        }
    }

    pub fn from_code(c: u8) -> Option<LutFn> {
        Some(match c {
            0 => LutFn::Identity,
            1 => LutFn::Relu,
            2 => LutFn::Tanh,
            3 => LutFn::Sigmoid,
            4 => LutFn::Exp,
            5 => LutFn::Log,
            6 => LutFn::ReluGrad,
            7 => LutFn::TanhGrad,
            8 => LutFn::SigmoidGrad,
            _ => return None,
        })
    }
}

pub const DEFAULT_ENTRIES: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct Lut {
    func: LutFn,
    lo: f64,
    hi: f64,
    format: FixedFormat,
    /// Raw fixed-point entries, one per bin; empty for exact functions.
    entries: Vec<i64>,
    len: usize,
}

impl Lut {
    pub fn new(func: LutFn, len: usize, lo: f64, hi: f64, format: FixedFormat) -> Result<Self, FxError> {
        if len == 0 || !(hi > lo) {
            return Err(FxError::LutRange { lo, hi, len });
        }
        let width = (hi - lo) / len as f64;
        let entries = if func.is_exact() {
            Vec::new()
        } else {
            (0..len)
                .map(|i| {
                    let center = lo + i as f64 * width;
                    format.raw(format.quantize(func.eval_f64(center)))
                })
                .collect()
        };
        Ok(Self {
            func,
            lo,
            hi,
            format,
            entries,
            len,
        })
    }

    pub fn with_defaults(func: LutFn, format: FixedFormat) -> Self {
        let (lo, hi) = func.default_range();
        Self::new(func, DEFAULT_ENTRIES, lo, hi, format).expect("default LUT parameters are valid")
    }

    pub fn func(&self) -> LutFn {
        self.func
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.len as f64
    }

    pub fn bin(&self, x: f64) -> usize {
        let i = ((x - self.lo) / self.bin_width()).round();
        if i < 0.0 {
            0
        } else {
            (i as usize).min(self.len - 1)
        }
    }

    /// Nearest-center lookup (bin i is centered on lo + i*width); inputs outside the range clamp to the boundary bins.
    pub fn eval(&self, x: f64) -> f64 {
        if self.func.is_exact() {
            return self.format.narrow(self.func.eval_f64(x));
        }
        self.format.value(self.entries[self.bin(x)])
    }

    pub fn dump_hex(&self) -> String {
        let mut out = String::new();
        let digits = self.format.bits() as usize / 4;
        let mask: u64 = if self.format.bits() == 32 { 0xFFFF_FFFF } else { 0xFFFF };
        let _ = writeln!(
            out,
            "# lut {:?} entries={} range=[{}, {}] format={}",
            self.func, self.len, self.lo, self.hi, self.format
        );
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{i:04} {:0digits$x}", (*e as u64) & mask);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_negative_is_zero() {
        let l = Lut::with_defaults(LutFn::Relu, FixedFormat::q16_16());
        assert_eq!(l.eval(-1.0), 0.0);
        assert_eq!(l.eval(2.5), 2.5);
    }

    #[test]
    fn tanh_at_zero() {
        let l = Lut::with_defaults(LutFn::Tanh, FixedFormat::q16_16());
        assert_eq!(l.eval(0.0), 0.0);
        let s = Lut::with_defaults(LutFn::Sigmoid, FixedFormat::q16_16());
        assert_eq!(s.eval(0.0), 0.5);
    }

    #[test]
    fn tanh_dense_sweep_error() {
        let fmt = FixedFormat::q16_16();
        let l = Lut::with_defaults(LutFn::Tanh, fmt);
        let mut worst: f64 = 0.0;
        let n = 200_000;
        for i in 0..=n {
            let x = fmt.quantize(-4.0 + 8.0 * i as f64 / n as f64);
            worst = worst.max((l.eval(x) - x.tanh()).abs());
        }
        assert!(worst <= 0.004, "max error {worst}");
    }

    #[test]
    fn out_of_range_clamps() {
        let l = Lut::with_defaults(LutFn::Sigmoid, FixedFormat::q16_16());
        assert_eq!(l.eval(100.0), l.eval(3.99));
        assert_eq!(l.eval(-100.0), l.eval(-4.0));
    }

    #[test]
    fn entries_quantize_bin_centers() {
        let fmt = FixedFormat::q8_8();
        let l = Lut::new(LutFn::Exp, 16, -8.0, 8.0, fmt).unwrap();
        for i in 0..16 {
            let c = -8.0 + i as f64;
            assert_eq!(l.eval(c), fmt.quantize(c.exp()));
        }
    }

    #[test]
    fn hex_dump_lines() {
        let l = Lut::new(LutFn::Sigmoid, 8, -4.0, 4.0, FixedFormat::q8_8()).unwrap();
        let dump = l.dump_hex();
        assert_eq!(dump.lines().count(), 9);
        assert!(dump.lines().nth(1).unwrap().starts_with("0000 "));
    }
}
