//! Nested-counter address generation.

use crate::compiler::{Dir, Gating, PmagProgram, Src};

use super::PmagError;

pub const END_MARK_16: u64 = 0xFFFF;
pub const END_MARK_32: u64 = 0xFFFF_FFFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AddressEvent {
    pub cycle: u64,
    pub vault: u16,
    pub addr: u64,
    pub dir: Dir,
    pub lane: u32,
    pub end: bool,
    /// Comparator-gated point carrying the zero constant; memory is not touched.
    pub zero: bool,
}

/// Outcome of evaluating a program at one counter point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Point {
    Addr(i64),
    Zero,
    Skip,
}

/// Absolute counter values of every point, r1 outermost.
pub fn counters(prog: &PmagProgram) -> impl Iterator<Item = [u32; 7]> + '_ {
    let total = prog.points();
    let mut cur = prog.origins;
    (0..total).map(move |i| {
        let out = cur;
        if i + 1 < total {
            for k in (0..7).rev() {
                cur[k] += 1;
                if cur[k] < prog.origins[k] + prog.bounds[k] {
                    break;
                }
                cur[k] = prog.origins[k];
            }
        }
        out
    })
}

fn signal(prog: &PmagProgram, s: Src, ctr: &[u32; 7], seq: u64) -> i64 {
    let base = |s: Src| -> i64 {
        match s {
            Src::R(i) => ctr[i as usize - 1] as i64,
            Src::Zero | Src::Unused => 0,
            Src::Radius => prog.radius as i64,
            Src::Seq => seq as i64,
            Src::P | Src::Q => unreachable!("composite signals are not mux inputs of s,t,u,v"),
        }
    };
    let m = &prog.mux;
    let comp = |x: Src, y: Src| {
        if prog.scaled {
            base(x) * prog.radius as i64 + base(y)
        } else {
            base(x) + base(y)
        }
    };
    match s {
        Src::P => comp(m.s, m.t),
        Src::Q => comp(m.u, m.v),
        other => base(other),
    }
}

/// Evaluate `prog` at counter point `ctr`; `seq` counts prior non-gated points.
pub fn eval(prog: &PmagProgram, ctr: &[u32; 7], seq: u64) -> Point {
    for c in prog.cmp.iter().flatten() {
        let v = signal(prog, c.sig, ctr, seq);
        if v < c.lo || v >= c.hi {
            return match prog.gating {
                Gating::Skip => Point::Skip,
                Gating::ZeroFill => Point::Zero,
            };
        }
    }
    let m = &prog.mux;
    let mut addr = prog.base;
    for (src, stride) in [m.a, m.b, m.c, m.d].into_iter().zip(prog.strides) {
        addr += signal(prog, src, ctr, seq) * stride;
    }
    Point::Addr(addr)
}

/// Lazily generated event sequence of one program, ending with the end-mark.
pub struct AddrStream<'a> {
    prog: &'a PmagProgram,
    points: Box<dyn Iterator<Item = [u32; 7]> + 'a>,
    pending: Option<(Point, u32)>,
    seq: u64,
    cycle: u64,
    vault: u16,
    finished: bool,
}

impl<'a> AddrStream<'a> {
    fn event(&mut self, addr: u64, lane: u32, end: bool, zero: bool) -> AddressEvent {
        let e = AddressEvent { cycle: self.cycle, vault: self.vault, addr, dir: self.prog.dir, lane, end, zero };
        self.cycle += 1;
        e
    }
}

impl Iterator for AddrStream<'_> {
    type Item = Result<AddressEvent, PmagError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some((pt, lane)) = self.pending {
                // A zero lane stride is one scalar shared by all lanes.
                let lanes = if self.prog.lane_stride == 0 { 1 } else { self.prog.lanes };
                let next = if lane + 1 < lanes { Some((pt, lane + 1)) } else { None };
                self.pending = next;
                return Some(match pt {
                    Point::Zero => Ok(self.event(0, lane, false, true)),
                    Point::Addr(a) => {
                        let a = a + lane as i64 * self.prog.lane_stride;
                        if a < 0 || a as u64 >= self.prog.extent {
                            self.finished = true;
                            self.pending = None;
                            Err(PmagError::OutOfRange { addr: a, extent: self.prog.extent, tensor: self.prog.tensor })
                        } else {
                            Ok(self.event(a as u64, lane, false, false))
                        }
                    }
                    Point::Skip => unreachable!(),
                });
            }
            if self.finished {
                return None;
            }
            match self.points.next() {
                Some(ctr) => match eval(self.prog, &ctr, self.seq) {
                    Point::Skip => continue,
                    pt => {
                        if let Point::Addr(_) = pt {
                            self.seq += 1;
                        }
                        self.pending = Some((pt, 0));
                    }
                },
                None => {
                    self.finished = true;
                    let mark = if self.prog.word_bits == 16 { END_MARK_16 } else { END_MARK_32 };
                    return Some(Ok(self.event(mark, 0, true, false)));
                }
            }
        }
    }
}

/// Event stream of `prog` as run by the PMAG of `vault`.
pub fn addr_stream(prog: &PmagProgram, vault: usize) -> AddrStream<'_> {
    AddrStream {
        prog,
        points: Box::new(counters(prog)),
        pending: None,
        seq: prog.seq_origin,
        cycle: 0,
        vault: vault as u16,
        finished: false,
    }
}

pub fn collect_stream(prog: &PmagProgram, vault: usize) -> Result<Vec<AddressEvent>, PmagError> {
    addr_stream(prog, vault).collect()
}

/// One line per event: `cycle vault dir addr`.
pub fn trace_dump(events: &[AddressEvent]) -> String {
    let mut s = String::new();
    for e in events {
        let d = match e.dir {
            Dir::Read => 'R',
            Dir::Write => 'W',
        };
        if e.zero {
            s.push_str(&format!("{} {} {d} zero\n", e.cycle, e.vault));
        } else {
            s.push_str(&format!("{} {} {d} {:#x}\n", e.cycle, e.vault, e.addr));
        }
    }
    s
}

/// All programs of a segment evaluated at one shared counter point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZipPoint {
    pub ctr: [u32; 7],
    pub a: Point,
    pub b: Option<Point>,
    pub out: Point,
    pub gate: Option<Point>,
}

/// Walk a segment's counter nest once, evaluating every program with its own
/// sequential-address counter.
pub fn zip(seg: &crate::compiler::Segment) -> impl Iterator<Item = ZipPoint> + '_ {
    let mut seq = [seg.a.seq_origin, 0, seg.out.seq_origin, 0];
    if let Some(b) = &seg.b {
        seq[1] = b.seq_origin;
    }
    if let Some(g) = &seg.gate {
        seq[3] = g.seq_origin;
    }
    counters(&seg.a).map(move |ctr| {
        let mut step = |k: usize, p: &PmagProgram| {
            let pt = eval(p, &ctr, seq[k]);
            if let Point::Addr(_) = pt {
                seq[k] += 1;
            }
            pt
        };
        let a = step(0, &seg.a);
        let b = seg.b.as_ref().map(|p| step(1, p));
        let out = step(2, &seg.out);
        let gate = seg.gate.as_ref().map(|p| step(3, p));
        ZipPoint { ctr, a, b, out, gate }
    })
}
