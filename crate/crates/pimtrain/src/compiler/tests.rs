use super::*;
use crate::machine::MachineConfig;
use crate::netspec::{parse_network, OpClass};
use crate::verify::{address_oracle, oracle_configs, oracle_nets};

#[test]
fn address_streams_match_loop_nests() {
    let mut bad = Vec::new();
    let mut ops = std::collections::BTreeSet::new();
    for net in oracle_nets() {
        for cfg in oracle_configs() {
            for r in address_oracle(&net, &cfg).unwrap() {
                ops.insert(r.op);
                if !r.ok {
                    bad.push(format!("{} {}: {}", cfg.name, r.step, r.detail));
                }
            }
        }
    }
    assert!(bad.is_empty(), "{}", bad.join("\n"));
    for op in OpClass::ALL {
        if op != OpClass::LossEval {
            assert!(ops.contains(&op), "{op} not covered");
        }
    }
}

#[test]
fn oracle_counts_are_nontrivial() {
    let net = &oracle_nets()[0];
    let cfg = &oracle_configs()[1];
    for r in address_oracle(net, cfg).unwrap() {
        eprintln!("{} {}", r.step, r.detail);
        assert!(!r.detail.starts_with("0 reads"), "{}", r.step);
    }
}

fn compiled(src: &str) -> Compiled {
    compile(&parse_network(src).unwrap(), &MachineConfig::hmc1()).unwrap()
}

fn step(c: &Compiled, op: OpClass) -> &StepPrograms {
    c.steps.iter().find(|s| s.step.op == op).unwrap()
}

const CONV: &str = "conv in_w=14 in_h=14 in_d=8 kernels=16 kw=3 kh=3\nact fn=relu\nmaxpool radius=2\nfc in=784 out=10\nloss fn=softmax_ce\ntrain batch=32\n";

#[test]
fn conv_ff_row() {
    let c = compiled(CONV);
    let st = step(&c, OpClass::ConvFF);
    let x = &st.table[0];
    assert_eq!(x.bounds, [16, 14, 14, 32, 8, 3, 3]);
    assert_eq!(x.mux, Mux { s: R2, t: R6, u: R3, v: R7, a: R4, b: Src::Q, c: Src::P, d: R5 });
    assert_eq!(st.table[1].mux, Mux::abcd(R1, R5, R6, R7));
    assert_eq!(st.pe, PeProgram { op: PeOp::Mac, mode: BitMode::B16, cnt2: [3, 3], cnt1: 9 });
    assert_eq!(st.pe.to_string(), "Mac 16-bit CNT2=(3, 3) CNT1=9");
}

#[test]
fn conv_bp_row() {
    let c = compiled(CONV);
    let st = step(&c, OpClass::ConvBP);
    let dy = &st.table[0];
    assert_eq!(dy.bounds, [8, 14, 14, 32, 16, 3, 3]);
    assert_eq!(dy.gating, Gating::ZeroFill);
    assert_eq!(dy.cmp.map(|c| c.unwrap().sig), [Src::P, Src::Q]);
    assert_eq!(st.table[1].strides[2..], [-3, -1]);
    assert_eq!(st.pe.mode, BitMode::B32Sr);
}

#[test]
fn conv_up_row() {
    let c = compiled(CONV);
    let st = step(&c, OpClass::ConvUP);
    let x = &st.table[0];
    assert_eq!(x.bounds, [1, 32, 14, 14, 8, 3, 3]);
    assert_eq!(x.mux, Mux { s: R3, t: R6, u: R4, v: R7, a: Src::Q, b: Src::P, c: R5, d: R2 });
    assert_eq!(st.table[1].lanes, 16);
    assert!(st.merge);
    assert_eq!(st.divisor, 32);
}

#[test]
fn pool_row() {
    let c = compiled(CONV);
    let st = step(&c, OpClass::Pool);
    assert_eq!(st.pe, PeProgram { op: PeOp::Max, mode: BitMode::B16, cnt2: [2, 2], cnt1: 4 });
    assert_eq!(st.pe.to_string(), "Max 16-bit CNT2=(2, 2) CNT1=4");
    assert!(st.table[0].scaled);
}

#[test]
fn fc_ff_rows() {
    let c = compiled("fc in=256 out=60\nloss fn=mse\ntrain batch=8\n");
    let st = step(&c, OpClass::FCFF);
    assert_eq!(st.table[0].mux, Mux::abcd(R4, R2, R5, Src::Zero));
    assert_eq!(st.table[1].mux, Mux::abcd(R4, R3, R2, R1));
    let b = st.table[1].bounds;
    let (p, l) = (b[2] as usize, b[3] as usize);
    assert_eq!((b[0] as usize, b[1] as usize), (60usize.div_ceil(p), 256usize.div_ceil(l)));
    assert!(l <= 4 * 32 && p <= 1023);
    assert_eq!(b[4], 8);
    assert_eq!(st.pe.cnt2, [p as u32, l as u32]);
}

#[test]
fn fc_bp_rows() {
    let c = compiled("fc in=256 out=60\nloss fn=mse\ntrain batch=8\n");
    let st = step(&c, OpClass::FCBP);
    assert!(st.merge);
    assert_eq!(st.table[2].bus, BusRole::MergeSink);
    assert_eq!(st.pe.mode, BitMode::B32Sr);
}

#[test]
fn fc_up_rows() {
    let c = compiled("fc in=64 out=4095\nloss fn=mse\ntrain batch=32\n");
    let st = step(&c, OpClass::FCUP);
    assert_eq!(st.table[0].bounds, [15, 2, 32, 273, 1, 1, 1]);
    assert_eq!(st.table[1].bounds[3], 32);
    assert_eq!(st.pe, PeProgram { op: PeOp::Mac, mode: BitMode::B32Sr, cnt2: [273, 1], cnt1: 1 });
    assert_eq!(st.pe.to_string(), "Mac 32+SR-bit CNT2=273 CNT1=1");
}

#[test]
fn prep_rows() {
    let c = compiled(CONV);
    let m = step(&c, OpClass::Merge);
    assert_eq!(m.table[0].mux, Mux::abcd(R3, R2, R1, Src::Zero));
    assert_eq!(m.pe.op, PeOp::Idle);
    let p = step(&c, OpClass::Partition);
    assert_eq!(p.table[0].mux.d, Src::Seq);
    assert_eq!(p.table[0].gating, Gating::Skip);
    assert_eq!(p.table[0].cmp.map(|c| c.unwrap().sig), [R2, R3]);
    let a = step(&c, OpClass::AddPad);
    let read = &a.table[0];
    assert_eq!(read.mux, Mux { s: R3, t: Src::Radius, u: R2, v: Src::Radius, a: Src::P, b: Src::Q, c: R1, d: Src::Zero });
    assert_eq!(read.gating, Gating::ZeroFill);
    assert_eq!(read.radius, 1);
}

#[test]
fn single_layer_entries() {
    let c = compiled("fc in=4 out=2\nloss fn=mse\ntrain batch=2\n");
    assert!((4..=6).contains(&c.image.entries), "{}", c.image.entries);
    assert_eq!(c.image.bytes.len(), c.image.entries * ENTRY_BYTES);
}

#[test]
fn dump_mentions_every_step() {
    let c = compiled(CONV);
    let d = dump_table(&c);
    assert_eq!(d.lines().count(), c.steps.len() + 2);
    assert!(d.contains("Conv-FF"));
}
