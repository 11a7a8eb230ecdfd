use super::*;
use crate::compiler::{compile, pad_programs, Compiled, Mux, PmagProgram, Placement, Src, R1, R2, R3};
use crate::fxnum::NumericMode;
use crate::machine::{MachineConfig, VaultMemory};
use crate::netspec::{parse_network, LayerKind, NetworkSpec, OpClass};
use proptest::prelude::*;

fn cfg(pes: usize) -> MachineConfig {
    MachineConfig { vaults: pes + 1, pes, ..MachineConfig::hmc1() }
}

fn build(src: &str, pes: usize) -> (NetworkSpec, Compiled) {
    let net = parse_network(src).unwrap();
    let c = compile(&net, &cfg(pes)).unwrap();
    (net, c)
}

fn step(c: &Compiled, op: OpClass) -> &crate::compiler::StepPrograms {
    c.steps.iter().find(|s| s.step.op == op).unwrap()
}

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * 0.5 - 3.0).collect()
}

#[test]
fn unit_bounds_give_one_event_then_end_mark() {
    let p = PmagProgram::new(OpClass::Merge, 0, [1; 7], Mux::abcd(R1, R2, R3, Src::Zero), [5, 7, 11, 0]).with_base(42);
    let ev = collect_stream(&p, 3).unwrap();
    assert_eq!(ev.len(), 2);
    assert_eq!((ev[0].addr, ev[0].vault, ev[0].end), (42, 3, false));
    assert!(ev[1].end);
    assert_eq!(ev[1].addr, END_MARK_32);
    let mut p16 = p.clone();
    p16.word_bits = 16;
    assert_eq!(collect_stream(&p16, 0).unwrap()[1].addr, END_MARK_16);
}

#[test]
fn out_of_range_is_an_error() {
    let p = PmagProgram::new(OpClass::Merge, 0, [1, 1, 4, 1, 1, 1, 1], Mux::abcd(R3, Src::Zero, Src::Zero, Src::Zero), [1, 0, 0, 0]).extent(3);
    let r = collect_stream(&p, 0);
    assert!(matches!(r, Err(PmagError::OutOfRange { addr: 3, extent: 3, .. })));
}

#[test]
fn add_pad_4x4_radius_1() {
    let (_, c) = build("conv in_w=4 in_h=4 in_d=1 kernels=1 kw=3 kh=3\nloss fn=mse\ntrain batch=1\n", 1);
    let seg = &step(&c, OpClass::AddPad).work[0].segments[0];
    let writes: Vec<_> = collect_stream(&seg.out, 0).unwrap().into_iter().filter(|e| !e.end).collect();
    assert_eq!(writes.len(), 36);
    let reads: Vec<_> = collect_stream(&seg.a, 0).unwrap().into_iter().filter(|e| !e.end).collect();
    assert_eq!(reads.iter().filter(|e| !e.zero).count(), 16);
    assert_eq!(reads.iter().filter(|e| e.zero).count(), 20);
}

#[test]
fn trace_dump_lines() {
    let (_, c) = build("conv in_w=4 in_h=4 in_d=1 kernels=1 kw=3 kh=3\nloss fn=mse\ntrain batch=1\n", 1);
    let seg = &step(&c, OpClass::AddPad).work[0].segments[0];
    let ev = collect_stream(&seg.a, 0).unwrap();
    let t = trace_dump(&ev);
    assert_eq!(t.lines().count(), 37);
    assert!(t.starts_with("0 0 R zero"));
}

const CNN: &str = "conv in_w=8 in_h=8 in_d=2 kernels=2 kw=3 kh=3\nfc in=128 out=3\nloss fn=mse\ntrain batch=2 modes=ff:float,bp:float,up:float\n";

#[test]
fn merge_then_partition_is_identity() {
    for pes in 2..=4 {
        let (_, c) = build(CNN, pes);
        let lay = &c.layout;
        let lt = &lay.layers[0];
        let (y, merged, dxc, dz) = (lt.y.unwrap().tensor, lt.merged.unwrap(), lt.dx_common.unwrap(), lt.dz.unwrap().tensor);
        let mut mem = VaultMemory::new(lay);
        let data = ramp(lay.tensors[y].len);
        mem.load(lay, y, &data);
        prep_exec(PrepKind::Merge, &step(&c, OpClass::Merge).work, lay, &mut mem).unwrap();
        assert_eq!(mem.fetch(lay, merged), data);
        let m = mem.fetch(lay, merged);
        mem.load(lay, dxc, &m);
        prep_exec(PrepKind::Partition, &step(&c, OpClass::Partition).work, lay, &mut mem).unwrap();
        assert_eq!(mem.fetch(lay, dz), data, "pes={pes}");
    }
}

#[test]
fn add_pad_then_remove_pad_is_identity() {
    for pes in 2..=4 {
        let (net, c) = build(CNN, pes);
        let lay = &c.layout;
        let LayerKind::Conv(conv) = net.layers[0].kind else { unreachable!() };
        let (x, xp) = (lay.input, lay.layers[0].padded.unwrap());
        let mut mem = VaultMemory::new(lay);
        let data = ramp(lay.tensors[x].len);
        mem.load(lay, x, &data);
        prep_exec(PrepKind::AddPad, &step(&c, OpClass::AddPad).work, lay, &mut mem).unwrap();
        mem.load(lay, x, &vec![0.0; data.len()]);
        let Placement::RowStrips { strips, .. } = &lay.tensors[xp].placement else { unreachable!() };
        let work = pad_programs(OpClass::RemovePad, x, xp, &conv, 2, strips, (lay.tensors[x].len, lay.tensors[xp].len), 32);
        prep_exec(PrepKind::RemovePad, &work, lay, &mut mem).unwrap();
        assert_eq!(mem.fetch(lay, x), data, "pes={pes}");
    }
}

/// 8x8 plane padded to 10x10 and split into 4 overlapping row strips; each
/// PE's region must equal the naive slice of the padded image.
#[test]
fn overlapping_strips_match_slices() {
    let (net, c) = build(CNN, 4);
    let lay = &c.layout;
    let LayerKind::Conv(conv) = net.layers[0].kind else { unreachable!() };
    let (x, xp) = (lay.input, lay.layers[0].padded.unwrap());
    let mut mem = VaultMemory::new(lay);
    let data = ramp(lay.tensors[x].len);
    mem.load(lay, x, &data);
    prep_exec(PrepKind::AddPad, &step(&c, OpClass::AddPad).work, lay, &mut mem).unwrap();
    let (d, h, w, n, r) = (conv.in_d, conv.in_h, conv.in_w, 2, conv.pad);
    let (hp, wp) = (h + 2 * r, w + 2 * r);
    let padded = |dd: usize, y: usize, xx: usize, s: usize| {
        if y < r || y >= h + r || xx < r || xx >= w + r {
            0.0
        } else {
            data[((dd * h + y - r) * w + xx - r) * n + s]
        }
    };
    let Placement::RowStrips { strips, .. } = &lay.tensors[xp].placement else { unreachable!() };
    assert!(strips.windows(2).any(|s| s[0].end > s[1].start), "strips overlap");
    for (e, rows) in strips.iter().enumerate() {
        let base = lay.bases[xp][e];
        let mut k = 0;
        for dd in 0..d {
            for y in rows.clone() {
                for xx in 0..wp {
                    for s in 0..n {
                        assert_eq!(mem.vaults[e][base + k], padded(dd, y, xx, s), "pe {e} ({dd},{y},{xx},{s})");
                        k += 1;
                    }
                }
            }
        }
        assert!(rows.end <= hp);
    }
}

#[test]
fn lut_transforms_data_only() {
    let ar = crate::fxnum::PhaseArith::new(NumericMode::Float, 1, 1);
    let v: Vec<f64> = apply_lut(vec![-1.0, 2.0], &ar, Some(crate::fxnum::LutFn::Relu)).collect();
    assert_eq!(v, vec![0.0, 2.0]);
    let v: Vec<f64> = apply_lut(vec![-1.0, 2.0], &ar, None).collect();
    assert_eq!(v, vec![-1.0, 2.0]);
}

proptest! {
    #[test]
    fn streams_are_deterministic(b in proptest::array::uniform7(1u32..4), s in proptest::array::uniform4(0i64..5)) {
        let p = PmagProgram::new(OpClass::Merge, 0, b, Mux::abcd(R1, R2, R3, Src::Zero), s);
        let a = collect_stream(&p, 1).unwrap();
        prop_assert_eq!(&a, &collect_stream(&p, 1).unwrap());
        prop_assert_eq!(a.len() as u64, p.points() + 1);
    }
}
