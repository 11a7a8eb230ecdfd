//! Global cycle loop over a tile plan: memory, then bus, then PEs each cycle.
//! Cycles in which nothing changes state are skipped in bulk.

use std::collections::VecDeque;

use super::tiles::{Feed, Sink, TilePlan};
use super::MachineConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stalls {
    pub buffer_empty: u64,
    pub bus_contention: u64,
    pub writeback: u64,
}

impl Stalls {
    pub fn total(&self) -> u64 {
        self.buffer_empty + self.bus_contention + self.writeback
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timing {
    pub cycles: u64,
    pub vault_read: Vec<u64>,
    pub vault_written: Vec<u64>,
    pub bus_broadcast: u64,
    pub bus_merged: u64,
    /// Summed over PEs.
    pub busy: u64,
    pub stalls: Stalls,
    pub ops: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("deadlock at cycle {cycle}: {waiting}")]
pub struct Deadlock {
    pub cycle: u64,
    pub waiting: String,
}

/// A vault channel: fixed latency on an idle channel, then `rate` bytes per
/// cycle in request order.
#[derive(Clone, Debug, Default)]
struct Chan {
    free_at: u64,
}

impl Chan {
    fn reserve(&mut self, now: u64, bytes: u64, latency: u64, rate: u64) -> u64 {
        let start = (now + latency).max(self.free_at);
        self.free_at = start + bytes.div_ceil(rate);
        self.free_at
    }
}

const PACKET: u64 = 256;

#[derive(Clone, Debug)]
struct PeState {
    next_fill: [usize; 2],
    held: [u32; 2],
    ready: [Vec<Option<u64>>; 2],
    cur: usize,
    busy_until: Option<u64>,
    out_used: u64,
    writes: Vec<(u64, u64)>,
    merges: VecDeque<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Wait {
    Working,
    Done,
    Data { bus: bool },
    Room,
}

pub fn simulate(plan: &TilePlan, cfg: &MachineConfig) -> Result<Timing, Deadlock> {
    let pes = plan.tiles.len();
    let common = cfg.vaults - 1;
    let rate = (cfg.channel_bytes_per_cycle().round() as u64).max(1);
    let bus_rate = (cfg.bus_bytes_per_cycle().round() as u64).max(1);
    let (lat, pipe) = (cfg.vault_latency, cfg.bus_pipeline);
    let out_cap = cfg.output_buffer_bytes as u64;
    let mut chans = vec![Chan::default(); cfg.vaults];
    let mut t = Timing { vault_read: vec![0; cfg.vaults], vault_written: vec![0; cfg.vaults], ops: plan.ops(), ..Timing::default() };
    let mut st: Vec<PeState> = plan
        .tiles
        .iter()
        .map(|tiles| PeState {
            next_fill: [0, 0],
            held: [0, 0],
            ready: [vec![None; tiles.len()], vec![None; tiles.len()]],
            cur: 0,
            busy_until: None,
            out_used: 0,
            writes: Vec::new(),
            merges: VecDeque::new(),
        })
        .collect();
    let mut next_item = 0usize;
    let mut bus_free = 0u64;
    let mut now = 0u64;
    let mut last_progress = 0u64;

    loop {
        let mut progress = false;
        // Memory: retire finished writebacks.
        for s in st.iter_mut() {
            let before = s.writes.len();
            s.writes.retain(|&(done, bytes)| {
                if done <= now {
                    s.out_used -= bytes;
                    false
                } else {
                    true
                }
            });
            progress |= s.writes.len() != before;
        }

        // Bus: broadcasts first, merges in PE order otherwise.
        if bus_free <= now {
            let issuable = plan.items.get(next_item).is_some_and(|it| {
                it.pes.iter().zip(&it.targets).all(|(&e, &(b, tile))| st[e].next_fill[b] == tile && st[e].held[b] < 2)
            });
            if issuable {
                let it = &plan.items[next_item];
                let done = chans[common].reserve(now, it.bytes, lat, rate.min(bus_rate));
                t.vault_read[common] += it.bytes;
                t.bus_broadcast += it.bytes;
                bus_free = done;
                for (&e, &(b, tile)) in it.pes.iter().zip(&it.targets) {
                    st[e].ready[b][tile] = Some(done + pipe);
                    st[e].held[b] += 1;
                    st[e].next_fill[b] += 1;
                }
                next_item += 1;
                progress = true;
            } else if let Some(e) = st.iter().position(|s| !s.merges.is_empty()) {
                let bytes = st[e].merges.pop_front().unwrap();
                let sent = now + bytes.div_ceil(bus_rate);
                let done = chans[common].reserve(now + pipe, bytes, 0, rate).max(sent + pipe);
                t.vault_written[common] += bytes;
                t.bus_merged += bytes;
                bus_free = sent;
                st[e].writes.push((done, bytes));
                progress = true;
            }
        }

        // PEs.
        let mut waits = Vec::with_capacity(pes);
        for (e, s) in st.iter_mut().enumerate() {
            let tiles = &plan.tiles[e];
            for b in 0..2 {
                while s.next_fill[b] < tiles.len() {
                    let i = s.next_fill[b];
                    let (feed, bytes) = tiles[i].feed[b];
                    match feed {
                        Feed::None | Feed::Resident => s.ready[b][i] = Some(now),
                        Feed::Local if s.held[b] < 2 => {
                            s.ready[b][i] = Some(chans[e].reserve(now, bytes, lat, rate));
                            t.vault_read[e] += bytes;
                            s.held[b] += 1;
                        }
                        _ => break,
                    }
                    s.next_fill[b] += 1;
                    progress = true;
                }
            }
            if let Some(end) = s.busy_until {
                if end <= now {
                    let tile = &tiles[s.cur];
                    for b in 0..2 {
                        if matches!(tile.feed[b].0, Feed::Local | Feed::Item(_)) {
                            s.held[b] -= 1;
                        }
                    }
                    if tile.emit > 0 {
                        match tile.sink {
                            Sink::Local => {
                                let done = chans[e].reserve(now, tile.emit, lat, rate);
                                t.vault_written[e] += tile.emit;
                                s.writes.push((done, tile.emit));
                            }
                            Sink::Merge => {
                                let mut left = tile.emit;
                                while left > 0 {
                                    s.merges.push_back(left.min(PACKET));
                                    left -= left.min(PACKET);
                                }
                            }
                        }
                    }
                    s.busy_until = None;
                    s.cur += 1;
                    progress = true;
                }
            }
            let w = if s.busy_until.is_some() {
                Wait::Working
            } else if s.cur == tiles.len() {
                Wait::Done
            } else {
                let tile = &tiles[s.cur];
                let ready = (0..2).all(|b| s.ready[b][s.cur].is_some_and(|r| r <= now));
                let room = tile.reserve == 0 || s.out_used + tile.reserve <= out_cap || s.out_used == 0;
                if ready && room {
                    let dur = (tile.work.div_ceil(plan.per_cycle)).max(1);
                    s.busy_until = Some(now + dur);
                    s.out_used += tile.reserve;
                    t.busy += dur;
                    progress = true;
                    Wait::Working
                } else if !ready {
                    let bus = (0..2).any(|b| s.ready[b][s.cur].is_none() && matches!(tile.feed[b].0, Feed::Item(_)));
                    Wait::Data { bus }
                } else {
                    Wait::Room
                }
            };
            waits.push(w);
        }

        let finished = st.iter().enumerate().all(|(e, s)| {
            s.cur == plan.tiles[e].len() && s.busy_until.is_none() && s.writes.is_empty() && s.merges.is_empty()
        });
        if finished && next_item == plan.items.len() {
            t.cycles = now;
            return Ok(t);
        }
        if progress {
            last_progress = now;
        }

        // Next cycle at which anything can change.
        let mut next = u64::MAX;
        let mut bump = |c: u64| {
            if c > now {
                next = next.min(c);
            }
        };
        bump(bus_free);
        for s in &st {
            if let Some(b) = s.busy_until {
                bump(b);
            }
            for &(d, _) in &s.writes {
                bump(d);
            }
            for b in 0..2 {
                if let Some(Some(r)) = s.ready[b].get(s.cur) {
                    bump(*r);
                }
            }
        }
        if progress {
            next = next.min(now + 1);
        }
        if next == u64::MAX || next - last_progress > cfg.deadlock_budget {
            let waiting = st
                .iter()
                .enumerate()
                .filter(|(e, s)| s.cur < plan.tiles[*e].len())
                .map(|(e, s)| format!("pe {e} tile {} fills {:?}", s.cur, s.next_fill))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Deadlock { cycle: now, waiting: format!("{waiting}; bus item {next_item}") });
        }

        // Attribute the idle span [now, next) of every PE.
        let span = next - now;
        for (e, w) in waits.into_iter().enumerate() {
            let s = &st[e];
            match w {
                Wait::Working => {}
                Wait::Done if !s.writes.is_empty() || !s.merges.is_empty() => t.stalls.writeback += span,
                Wait::Done => t.stalls.buffer_empty += span,
                Wait::Data { bus: true } if bus_free > now || st.iter().any(|o| !o.merges.is_empty()) => {
                    t.stalls.bus_contention += span
                }
                Wait::Data { .. } => t.stalls.buffer_empty += span,
                Wait::Room => t.stalls.writeback += span,
            }
        }
        now = next;
    }
}
