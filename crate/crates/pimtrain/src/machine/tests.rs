use super::*;
use crate::goldref::{synthetic_batches, Params};
use crate::netspec::parse_network;

fn cfg(pes: usize) -> MachineConfig {
    MachineConfig { vaults: pes + 1, pes, ..MachineConfig::hmc1() }
}

fn bit_match(src: &str, pes: usize, batches: usize) {
    compare(src, pes, batches, 0.0)
}

/// Stochastic rounding draws happen in a different order than in the
/// reference, so those modes only agree to within a few ulps.
fn compare(src: &str, pes: usize, batches: usize, tol: f64) {
    let net = parse_network(src).unwrap();
    let m = crate::verify::machine_vs_reference(&net, &cfg(pes), 7, batches, tol).unwrap();
    assert_eq!(m, None);
}

#[test]
fn initial_weights_match_reference() {
    let net = parse_network(&format!("{MLP}train batch=4\n")).unwrap();
    assert_eq!(Machine::new(&net, &cfg(2), 5).unwrap().params(), Params::init(&net, 5));
}

const MLP: &str = "fc in=6 out=5\nact fn=tanh\nfc in=5 out=3\nloss fn=softmax_ce\n";

#[test]
fn mlp_float_bit_match() {
    bit_match(&format!("{MLP}train batch=4 lr=0.1 modes=ff:float,bp:float,up:float\n"), 3, 10);
}

#[test]
fn mlp_fixed32_bit_match() {
    bit_match(&format!("{MLP}train batch=4 lr=0.1 modes=ff:fixed32,bp:fixed32,up:fixed32\n"), 3, 10);
}

#[test]
fn mlp_default_modes_match() {
    compare(&format!("{MLP}train batch=4 lr=0.1\n"), 2, 5, 1e-3);
}

const CNN: &str = "conv in_w=6 in_h=6 in_d=2 kernels=3 kw=3 kh=3\nact fn=relu\nmaxpool radius=2\nfc in=27 out=4\nact fn=sigmoid\nfc in=4 out=3\nloss fn=mse\n";

#[test]
fn cnn_float_bit_match() {
    bit_match(&format!("{CNN}train batch=2 lr=0.05 modes=ff:float,bp:float,up:float\n"), 3, 4);
}

#[test]
fn cnn_default_modes_match() {
    compare(&format!("{CNN}train batch=2 lr=0.05\n"), 4, 3, 1e-3);
}

#[test]
fn unpadded_conv_chain_bit_match() {
    let src = "conv in_w=5 in_h=4 in_d=1 kernels=2 kw=3 kh=3\nact fn=tanh\nconv in_w=5 in_h=4 in_d=2 kernels=2 kw=1 kh=1\nfc in=40 out=3\nloss fn=mse\ntrain batch=3 lr=0.05 modes=ff:float,bp:float,up:float\n";
    bit_match(src, 2, 3);
}

#[test]
fn elman_bit_match() {
    let src = "recurrent in=3 hidden=4 steps=3 cell=elman\nfc in=4 out=2\nloss fn=softmax_ce\ntrain batch=2 lr=0.1 modes=ff:float,bp:float,up:float\n";
    bit_match(src, 2, 4);
}

#[test]
fn gru_bit_match() {
    let src = "recurrent in=3 hidden=4 steps=3 cell=gru\nloss fn=mse\ntrain batch=2 lr=0.1 modes=ff:float,bp:float,up:float\n";
    bit_match(src, 3, 4);
    let src = "recurrent in=3 hidden=4 steps=2 cell=gru\nfc in=4 out=2\nloss fn=softmax_ce\ntrain batch=2 lr=0.1\n";
    compare(src, 2, 3, 1e-3);
}

#[test]
fn zero_rate_keeps_weights() {
    let net = parse_network(&format!("{MLP}train batch=4 lr=0\n")).unwrap();
    let mut m = Machine::new(&net, &cfg(2), 1).unwrap();
    let p = m.params();
    for b in synthetic_batches(&net, 2, 3) {
        m.train_batch(&b).unwrap();
    }
    assert_eq!(m.params(), p);
}

#[test]
fn cycles_and_stalls_conserve_work() {
    let net = parse_network(&format!("{CNN}train batch=2 lr=0.05\n")).unwrap();
    let c = cfg(3);
    let mut m = Machine::new(&net, &c, 1).unwrap();
    let (_, traces) = m.train_batch(&synthetic_batches(&net, 1, 1)[0]).unwrap();
    for t in &traces {
        assert_eq!(t.cycles * c.pes as u64, t.busy + t.stalls().total(), "{}", t.step);
    }
}
