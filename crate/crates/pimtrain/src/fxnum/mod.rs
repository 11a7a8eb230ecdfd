//! Bit-exact fixed-point numerics: Q-formats, the shared-LFSR stochastic
//! rounding unit, dual-mode MAC lanes, comparator lanes, and LUT nonlinearities.

mod arith;
mod format;
mod lfsr;
mod lut;
mod mac;
mod round;

use thiserror::Error;

pub use arith::{Acc, PhaseArith};
pub use format::{FixedFormat, NumericMode, RoundMode};
pub use lfsr::{Lfsr32, TAPS};
pub use lut::{Lut, LutFn, DEFAULT_ENTRIES};
pub use mac::{mac_step, max_step, MacMode, MacStats};
pub use round::{stochastic_round, truncate, Rounder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FxError {
    #[error("unsupported fixed-point width {0} (expected 16 or 32)")]
    Width(u8),
    #[error("fraction bits {frac} must be below total bits {bits}")]
    Fraction { bits: u8, frac: u8 },
    #[error("unknown numeric mode `{0}`")]
    UnknownMode(String),
    #[error("invalid LUT: range [{lo}, {hi}] with {len} entries")]
    LutRange { lo: f64, hi: f64, len: usize },
}
