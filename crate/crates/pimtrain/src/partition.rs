//! Contiguous work splits across PEs.

use std::ops::Range;

/// Split `total` items into `parts` contiguous ranges of ceil(total/parts)
/// items; trailing ranges are shorter or empty.
pub fn ranges(total: usize, parts: usize) -> Vec<Range<usize>> {
    assert!(parts > 0, "at least one part");
    let size = total.div_ceil(parts);
    (0..parts)
        .map(|p| {
            let lo = (p * size).min(total);
            let hi = ((p + 1) * size).min(total);
            lo..hi
        })
        .collect()
}

/// Index of the range containing `i`.
pub fn owner(total: usize, parts: usize, i: usize) -> usize {
    debug_assert!(i < total);
    i / total.div_ceil(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_split() {
        assert_eq!(ranges(10, 4), vec![0..3, 3..6, 6..9, 9..10]);
        assert_eq!(ranges(4, 6), vec![0..1, 1..2, 2..3, 3..4, 4..4, 4..4]);
        assert_eq!(ranges(1024, 15)[14], 966..1024);
        for i in 0..10 {
            assert!(ranges(10, 4)[owner(10, 4, i)].contains(&i));
        }
    }
}
