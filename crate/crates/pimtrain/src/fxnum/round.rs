//! Rounding of double-width intermediates back to storage width.

use super::format::RoundMode;
use super::lfsr::Lfsr32;

/// Round `num / den` to an integer. Rounds up when `rand` falls below the
/// discarded fraction expressed in units of 2^-32, so the up-probability equals
/// the fraction to within 2^-32.
#[inline]
pub fn stochastic_round(num: i128, den: i128, rand: u32) -> i128 {
    debug_assert!(den > 0);
    let floor = num.div_euclid(den);
    let rem = num.rem_euclid(den);
    if rem == 0 {
        return floor;
    }
    let frac32 = ((rem as u128) << 32) / den as u128;
    if (rand as u128) < frac32 {
        floor + 1
    } else {
        floor
    }
}

#[inline]
pub fn truncate(num: i128, den: i128) -> i128 {
    num.div_euclid(den)
}

/// Rounding unit of a MAC array.
///
/// Each call to [`Rounder::round`] rounds one lane. Lanes are visited in
/// order; every `lanes` roundings form one writeback cycle. In SR-LO mode the
/// shared shift register takes one fresh LFSR bit at each cycle boundary and
/// every lane of that cycle compares against the same register value.
#[derive(Clone, Debug)]
pub struct Rounder {
    mode: RoundMode,
    lanes: usize,
    lane_gens: Vec<Lfsr32>,
    shared: Lfsr32,
    shift_reg: u32,
    issued: u64,
}

impl Rounder {
    pub fn new(mode: RoundMode, lanes: usize, seed: u32) -> Self {
        let lanes = lanes.max(1);
        let mut seeder = Lfsr32::new(seed ^ 0x9E37_79B9);
        // two generators per lane: one per 16-bit pair
        let lane_gens = match mode {
            RoundMode::Stochastic => (0..2 * lanes).map(|_| Lfsr32::new(seeder.next_word())).collect(),
            _ => Vec::new(),
        };
        let mut shared = Lfsr32::new(seed);
        let mut shift_reg = 0;
        if mode == RoundMode::StochasticLo {
            for _ in 0..32 {
                shift_reg = (shift_reg << 1) | shared.step();
            }
        }
        Self {
            mode,
            lanes,
            lane_gens,
            shared,
            shift_reg,
            issued: 0,
        }
    }

    pub fn mode(&self) -> RoundMode {
        self.mode
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    fn draw(&mut self) -> u32 {
        let lane = (self.issued % self.lanes as u64) as usize;
        match self.mode {
            RoundMode::Truncate => 0,
            RoundMode::Stochastic => self.lane_gens[lane].next_word(),
            RoundMode::StochasticLo => {
                if lane == 0 && self.issued > 0 {
                    self.shift_reg = (self.shift_reg << 1) | self.shared.step();
                }
                self.shift_reg
            }
        }
    }

    /// Round `num / den` (den > 0) in this unit's mode.
    pub fn round(&mut self, num: i128, den: i128) -> i128 {
        let r = match self.mode {
            RoundMode::Truncate => truncate(num, den),
            _ => {
                let rand = self.draw();
                stochastic_round(num, den, rand)
            }
        };
        self.issued += 1;
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_unchanged() {
        for mode in [RoundMode::Truncate, RoundMode::Stochastic, RoundMode::StochasticLo] {
            let mut r = Rounder::new(mode, 32, 7);
            for v in -50i128..50 {
                assert_eq!(r.round(v * 256, 256), v);
            }
            assert_eq!(r.issued(), 100);
        }
    }

    #[test]
    fn truncation_is_floor() {
        assert_eq!(truncate(-1, 256), -1);
        assert_eq!(truncate(255, 256), 0);
        assert_eq!(truncate(-256, 256), -1);
    }

    #[test]
    fn stochastic_round_bounds() {
        assert_eq!(stochastic_round(128, 256, 0), 1);
        assert_eq!(stochastic_round(128, 256, u32::MAX), 0);
        assert_eq!(stochastic_round(-128, 256, 0), 0);
        assert_eq!(stochastic_round(-128, 256, u32::MAX), -1);
    }

    fn up_frequency(mode: RoundMode, rem: i128, den: i128, trials: usize) -> f64 {
        let mut r = Rounder::new(mode, 1, 12345);
        let ups = (0..trials).filter(|_| r.round(rem, den) == 1).count();
        ups as f64 / trials as f64
    }

    #[test]
    fn midway_frequency() {
        for mode in [RoundMode::Stochastic, RoundMode::StochasticLo] {
            let f = up_frequency(mode, 1 << 15, 1 << 16, 100_000);
            assert!((0.495..=0.505).contains(&f), "{mode:?}: {f}");
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        for mode in [RoundMode::Stochastic, RoundMode::StochasticLo] {
            let mut a = Rounder::new(mode, 32, 99);
            let mut b = Rounder::new(mode, 32, 99);
            for i in 0..10_000i128 {
                assert_eq!(a.round(i * 37 + 11, 1000), b.round(i * 37 + 11, 1000));
            }
        }
    }
}
