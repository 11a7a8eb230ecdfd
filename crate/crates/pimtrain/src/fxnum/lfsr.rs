//! 32-bit maximal-length Fibonacci LFSR, taps (32, 22, 2, 1).

use serde::{Deserialize, Serialize};

/// Feedback taps as bit positions (tap n -> bit n-1).
pub const TAPS: [u32; 4] = [32, 22, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lfsr32 {
    state: u32,
}

impl Lfsr32 {
    /// A zero seed would lock the register; it is remapped to 1.
    pub fn new(seed: u32) -> Self {
        Self {
            state: if seed == 0 { 1 } else { seed },
        }
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    /// Shift left one position and return the new bit.
    #[inline]
    pub fn step(&mut self) -> u32 {
        let s = self.state;
        let fb = ((s >> 31) ^ (s >> 21) ^ (s >> 1) ^ s) & 1;
        self.state = (s << 1) | fb;
        fb
    }

    /// Fresh 32-bit word: 32 consecutive shifts.
    pub fn next_word(&mut self) -> u32 {
        for _ in 0..32 {
            self.step();
        }
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    // GF(2) 32x32 matrices stored as column images: m[j] = M * e_j.
    type Mat = [u32; 32];

    fn apply(m: &Mat, v: u32) -> u32 {
        let mut out = 0;
        for (j, col) in m.iter().enumerate() {
            if (v >> j) & 1 == 1 {
                out ^= col;
            }
        }
        out
    }

    fn compose(a: &Mat, b: &Mat) -> Mat {
        let mut out = [0u32; 32];
        for j in 0..32 {
            out[j] = apply(a, b[j]);
        }
        out
    }

    fn identity() -> Mat {
        let mut m = [0u32; 32];
        for (j, c) in m.iter_mut().enumerate() {
            *c = 1 << j;
        }
        m
    }

    fn pow(m: &Mat, mut e: u64) -> Mat {
        let mut base = *m;
        let mut acc = identity();
        while e > 0 {
            if e & 1 == 1 {
                acc = compose(&acc, &base);
            }
            base = compose(&base, &base);
            e >>= 1;
        }
        acc
    }

    fn transition() -> Mat {
        // The step is linear over GF(2), so its matrix is the image of each unit vector.
        let mut m = [0u32; 32];
        for (j, c) in m.iter_mut().enumerate() {
            let mut l = Lfsr32 { state: 1 << j };
            l.step();
            *c = l.state;
        }
        m
    }

    #[test]
    fn period_is_maximal() {
        let order = (1u64 << 32) - 1;
        let m = transition();
        assert_eq!(pow(&m, order), identity());
        for q in [3u64, 5, 17, 257, 65537] {
            assert_ne!(pow(&m, order / q), identity(), "order divides (2^32-1)/{q}");
        }
    }

    #[test]
    fn no_repeat_within_2_pow_20() {
        for seed in [1u32, 0xDEAD_BEEF, 0x8000_0000, 0x1234_5678] {
            let mut l = Lfsr32::new(seed);
            let mut seen = HashSet::with_capacity(1 << 20);
            for _ in 0..(1 << 20) {
                assert!(seen.insert(l.state()));
                l.step();
            }
        }
    }

    #[test]
    fn zero_seed_is_remapped() {
        let mut l = Lfsr32::new(0);
        assert_ne!(l.state(), 0);
        for _ in 0..100 {
            l.step();
            assert_ne!(l.state(), 0);
        }
    }

    #[test]
    fn deterministic_sequence() {
        let mut a = Lfsr32::new(42);
        let mut b = Lfsr32::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_word(), b.next_word());
        }
    }
}
