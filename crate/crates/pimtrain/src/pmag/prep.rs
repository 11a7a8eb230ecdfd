//! Data-preparation moves: merge, partition, add pad, remove pad.

use std::collections::HashMap;

use crate::compiler::{LayoutPlan, PeWork, PmagProgram};
use crate::machine::VaultMemory;

use super::stream::{zip, Point};
use super::PmagError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepKind {
    Merge,
    Partition,
    AddPad,
    RemovePad,
}

/// (vault, physical address) touched by lane `lane` of address `addr`.
pub(crate) fn resolve(lay: &LayoutPlan, p: &PmagProgram, addr: i64, lane: u32, pe: usize) -> Result<(usize, usize), PmagError> {
    let a = addr + lane as i64 * p.lane_stride;
    if a < 0 || a as u64 >= p.extent {
        return Err(PmagError::OutOfRange { addr: a, extent: p.extent, tensor: p.tensor });
    }
    Ok(match p.physical {
        Some(v) => (v, lay.bases[p.tensor][v] + a as usize),
        None => lay.locate(p.tensor, a as usize, Some(pe)),
    })
}

/// Run the per-PE copy programs of a preparation step. Every lane of every
/// non-skipped point moves one element; zero-filled reads write zero.
pub fn prep_exec(kind: PrepKind, work: &[PeWork], lay: &LayoutPlan, mem: &mut VaultMemory) -> Result<(), PmagError> {
    let _ = kind;
    let mut written: HashMap<(usize, usize), f64> = HashMap::new();
    for w in work {
        for seg in &w.segments {
            if !seg.a.same_nest(&seg.out) {
                return Err(PmagError::Nest);
            }
            for zp in zip(seg) {
                let Point::Addr(dst) = zp.out else {
                    continue;
                };
                for lane in 0..seg.out.lanes {
                    let v = match zp.a {
                        Point::Skip => continue,
                        Point::Zero => 0.0,
                        Point::Addr(src) => {
                            let (vv, pa) = resolve(lay, &seg.a, src, lane, w.pe)?;
                            mem.vaults[vv][pa]
                        }
                    };
                    let at = resolve(lay, &seg.out, dst, lane, w.pe)?;
                    if let Some(&old) = written.get(&at) {
                        if old.to_bits() != v.to_bits() {
                            let idx = (dst + lane as i64 * seg.out.lane_stride) as usize;
                            return Err(PmagError::Overlap { tensor: seg.out.tensor, idx, a: old, b: v });
                        }
                    }
                    written.insert(at, v);
                    mem.vaults[at.0][at.1] = v;
                }
            }
        }
    }
    Ok(())
}
