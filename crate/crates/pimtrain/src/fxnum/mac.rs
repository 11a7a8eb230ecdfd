//! Dual-mode MAC lanes and the comparator lanes used for max pooling.

use serde::{Deserialize, Serialize};

use super::format::FixedFormat;
use super::round::Rounder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MacMode {
    /// Each 32-bit lane carries two independent 16-bit operand pairs.
    Fixed16x2,
    Fixed32,
}

impl MacMode {
    pub fn pairs_per_lane(&self) -> usize {
        match self {
            MacMode::Fixed16x2 => 2,
            MacMode::Fixed32 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacStats {
    pub macs: u64,
    pub saturations: u64,
}

/// `y <- a*x + y` on every lane, rounding the double-width result back to
/// `fmt` through `rounder` and saturating on overflow.
///
/// In [`MacMode::Fixed16x2`] `a` holds two operands and `x` holds two values
/// per lane; lane `l` computes `a[0]*x[2l] + a[1]*x[2l+1] + y[l]`.
pub fn mac_step(
    mode: MacMode,
    fmt: FixedFormat,
    a: &[i64],
    x: &[i64],
    y: &mut [i64],
    rounder: &mut Rounder,
    stats: &mut MacStats,
) {
    let pairs = mode.pairs_per_lane();
    assert_eq!(a.len(), pairs, "scalar operand count");
    assert_eq!(x.len(), pairs * y.len(), "lane operand count");
    let one = 1i128 << fmt.frac();
    for (l, yl) in y.iter_mut().enumerate() {
        let mut wide = (*yl as i128) << fmt.frac();
        for p in 0..pairs {
            wide += a[p] as i128 * x[pairs * l + p] as i128;
        }
        let (v, sat) = fmt.saturate(rounder.round(wide, one));
        *yl = v;
        stats.macs += pairs as u64;
        stats.saturations += sat as u64;
    }
}

/// Per-lane running max; the ID moves only on strict improvement so ties keep
/// the earlier position.
pub fn max_step<T: PartialOrd + Copy>(x: &[T], y: &mut [T], ids: &mut [u32], pos: u32) {
    assert_eq!(x.len(), y.len());
    assert_eq!(ids.len(), y.len());
    for l in 0..x.len() {
        if x[l] > y[l] {
            y[l] = x[l];
            ids[l] = pos;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxnum::RoundMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_scalar_leaves_y() {
        let fmt = FixedFormat::q16_16();
        let mut r = Rounder::new(RoundMode::StochasticLo, 32, 3);
        let x: Vec<i64> = (0..32).map(|i| i * 1000 - 7000).collect();
        let mut y: Vec<i64> = (0..32).map(|i| i * 13).collect();
        let before = y.clone();
        let mut st = MacStats::default();
        mac_step(MacMode::Fixed32, fmt, &[0], &x, &mut y, &mut r, &mut st);
        assert_eq!(y, before);
        assert_eq!(r.issued(), 32);
    }

    #[test]
    fn sixteen_bit_pairs_count_double() {
        let fmt = FixedFormat::q8_8();
        let mut r = Rounder::new(RoundMode::Truncate, 32, 1);
        let x = vec![256i64; 64];
        let mut y = vec![0i64; 32];
        let mut st = MacStats::default();
        mac_step(MacMode::Fixed16x2, fmt, &[256, 512], &x, &mut y, &mut r, &mut st);
        assert_eq!(st.macs, 64);
        assert!(y.iter().all(|&v| v == 3 * 256));
    }

    #[test]
    fn fixed32_matches_wide_integer_oracle() {
        let fmt = FixedFormat::q16_16();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = Rounder::new(RoundMode::Truncate, 32, 1);
        for _ in 0..200 {
            let a = rng.gen_range(-(1i64 << 20)..(1 << 20));
            let x: Vec<i64> = (0..32).map(|_| rng.gen_range(-(1i64 << 20)..(1 << 20))).collect();
            let y0: Vec<i64> = (0..32).map(|_| rng.gen_range(-(1i64 << 24)..(1 << 24))).collect();
            let mut y = y0.clone();
            let mut st = MacStats::default();
            mac_step(MacMode::Fixed32, fmt, &[a], &x, &mut y, &mut r, &mut st);
            for l in 0..32 {
                // floor((a*x)/2^16) + y, computed with plain i128 arithmetic
                let prod = a as i128 * x[l] as i128;
                let expect = prod.div_euclid(1 << 16) + y0[l] as i128;
                let expect = expect.clamp(fmt.min_raw() as i128, fmt.max_raw() as i128);
                assert_eq!(y[l] as i128, expect);
            }
        }
    }

    #[test]
    fn overflow_saturates_and_counts() {
        let fmt = FixedFormat::q8_8();
        let mut r = Rounder::new(RoundMode::Truncate, 1, 1);
        let mut y = vec![fmt.max_raw()];
        let mut st = MacStats::default();
        mac_step(MacMode::Fixed32, fmt, &[fmt.max_raw()], &[fmt.max_raw()], &mut y, &mut r, &mut st);
        assert_eq!(y[0], fmt.max_raw());
        assert_eq!(st.saturations, 1);
    }

    #[test]
    fn max_stream_and_ties() {
        let mut y = [i64::MIN];
        let mut ids = [0u32];
        for (pos, v) in [3i64, 1, 4, 1].iter().enumerate() {
            max_step(&[*v], &mut y, &mut ids, pos as u32);
        }
        assert_eq!((y[0], ids[0]), (4, 2));
        let mut y = [5i64];
        let mut ids = [7u32];
        max_step(&[5], &mut y, &mut ids, 9);
        assert_eq!(ids[0], 7);
    }
}
