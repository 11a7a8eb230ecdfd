use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FxError;

/// Signed two's-complement Q-format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    bits: u8,
    frac: u8,
}

impl FixedFormat {
    pub fn new(bits: u8, frac: u8) -> Result<Self, FxError> {
        if bits != 16 && bits != 32 {
            return Err(FxError::Width(bits));
        }
        if frac >= bits {
            return Err(FxError::Fraction { bits, frac });
        }
        Ok(Self { bits, frac })
    }

    /// Q8.8
    pub const fn q8_8() -> Self {
        Self { bits: 16, frac: 8 }
    }

    /// Q16.16
    pub const fn q16_16() -> Self {
        Self { bits: 32, frac: 16 }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn frac(&self) -> u8 {
        self.frac
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac) as f64
    }

    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn min_raw(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 / self.scale()
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 / self.scale()
    }

    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Clamp to the representable range; the flag reports whether clamping happened.
    pub fn saturate(&self, raw: i128) -> (i64, bool) {
        if raw > self.max_raw() as i128 {
            (self.max_raw(), true)
        } else if raw < self.min_raw() as i128 {
            (self.min_raw(), true)
        } else {
            (raw as i64, false)
        }
    }

    /// Raw integer of a value already on this grid. Off-grid values are floored.
    pub fn raw(&self, v: f64) -> i64 {
        (v * self.scale()).floor() as i64
    }

    pub fn value(&self, raw: i64) -> f64 {
        raw as f64 / self.scale()
    }

    /// Round-to-nearest quantization with saturation; used for host-side data loading.
    pub fn quantize(&self, v: f64) -> f64 {
        let r = (v * self.scale()).round();
        let r = r.clamp(self.min_raw() as f64, self.max_raw() as f64);
        r / self.scale()
    }

    /// Floor onto this grid with saturation (narrowing reads).
    pub fn narrow(&self, v: f64) -> f64 {
        let r = (v * self.scale()).floor();
        let r = r.clamp(self.min_raw() as f64, self.max_raw() as f64);
        r / self.scale()
    }

    pub fn on_grid(&self, v: f64) -> bool {
        let s = v * self.scale();
        s == s.floor() && s >= self.min_raw() as f64 && s <= self.max_raw() as f64
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.bits - self.frac, self.frac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundMode {
    Truncate,
    /// Independent generator per lane.
    Stochastic,
    /// One LFSR bit per cycle shared across lanes through a 32-bit shift register.
    StochasticLo,
}

/// Numeric representation used by one training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NumericMode {
    Float,
    Fixed16,
    Fixed32,
    Fixed32Sr,
    Fixed32SrLo,
}

impl NumericMode {
    pub fn is_float(&self) -> bool {
        matches!(self, NumericMode::Float)
    }

    pub fn format(&self) -> Option<FixedFormat> {
        match self {
            NumericMode::Float => None,
            NumericMode::Fixed16 => Some(FixedFormat::q8_8()),
            _ => Some(FixedFormat::q16_16()),
        }
    }

    pub fn round_mode(&self) -> RoundMode {
        match self {
            NumericMode::Fixed32Sr => RoundMode::Stochastic,
            NumericMode::Fixed32SrLo => RoundMode::StochasticLo,
            _ => RoundMode::Truncate,
        }
    }

    pub fn keyword(&self) -> &'static str {
        match self {
            NumericMode::Float => "float",
            NumericMode::Fixed16 => "fixed16",
            NumericMode::Fixed32 => "fixed32",
            NumericMode::Fixed32Sr => "fixed32sr",
            NumericMode::Fixed32SrLo => "fixed32srlo",
        }
    }
}

impl fmt::Display for NumericMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for NumericMode {
    type Err = FxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "float" => NumericMode::Float,
            "fixed16" => NumericMode::Fixed16,
            "fixed32" => NumericMode::Fixed32,
            "fixed32sr" => NumericMode::Fixed32Sr,
            "fixed32srlo" => NumericMode::Fixed32SrLo,
            other => return Err(FxError::UnknownMode(other.to_string())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_bounds() {
        let q = FixedFormat::q8_8();
        assert_eq!(q.max_raw(), 32767);
        assert_eq!(q.min_raw(), -32768);
        assert_eq!(q.to_string(), "Q8.8");
        assert!(FixedFormat::new(16, 16).is_err());
        assert!(FixedFormat::new(24, 8).is_err());
    }

    #[test]
    fn saturation_flags() {
        let q = FixedFormat::q16_16();
        assert_eq!(q.saturate(1 << 40), (q.max_raw(), true));
        assert_eq!(q.saturate(-(1 << 40)), (q.min_raw(), true));
        assert_eq!(q.saturate(5), (5, false));
    }

    #[test]
    fn narrow_is_floor() {
        let q = FixedFormat::q8_8();
        assert_eq!(q.narrow(1.0 / 512.0), 0.0);
        assert_eq!(q.narrow(-1.0 / 512.0), -1.0 / 256.0);
        assert!(q.on_grid(q.narrow(0.123)));
    }

    #[test]
    fn mode_keywords_round_trip() {
        for m in [
            NumericMode::Float,
            NumericMode::Fixed16,
            NumericMode::Fixed32,
            NumericMode::Fixed32Sr,
            NumericMode::Fixed32SrLo,
        ] {
            assert_eq!(m.keyword().parse::<NumericMode>().unwrap(), m);
        }
    }
}
