//! Functional checks: machine vs reference training, and reference gradients
//! vs finite differences.

use crate::goldref::{synthetic_batches, Engine, Params};
use crate::machine::{Machine, MachineConfig, MachineError};
use crate::netspec::NetworkSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub batch: usize,
    pub what: String,
    pub got: f64,
    pub want: f64,
}

/// Train `batches` synthetic minibatches on the machine and on the reference
/// engine; report the first loss or weight differing by more than `tol`
/// (`tol = 0` demands identical bits).
pub fn machine_vs_reference(
    net: &NetworkSpec,
    cfg: &MachineConfig,
    seed: u64,
    batches: usize,
    tol: f64,
) -> Result<Option<Mismatch>, MachineError> {
    let mut m = Machine::new(net, cfg, seed)?;
    let mut eng = Engine::new(net, cfg.pes, cfg.lanes, seed);
    let mut p = Params::init(net, seed);
    let differs = |a: f64, b: f64| if tol == 0.0 { a.to_bits() != b.to_bits() } else { (a - b).abs() > tol };
    for (k, b) in synthetic_batches(net, seed ^ 0x5eed, batches).iter().enumerate() {
        let (loss, _) = m.train_batch(b)?;
        let (np, want) = eng.train_step(&p, b);
        p = np;
        if differs(loss, want) && !(tol > 0.0 && (loss - want).abs() <= tol * want.abs()) {
            return Ok(Some(Mismatch { batch: k, what: "loss".into(), got: loss, want }));
        }
        let got = m.params();
        for (i, (a, b)) in got.layers.iter().zip(&p.layers).enumerate() {
            for (g, (a, b)) in a.iter().zip(b).enumerate() {
                if let Some(j) = (0..a.len()).find(|&j| differs(a[j], b[j])) {
                    return Ok(Some(Mismatch {
                        batch: k,
                        what: format!("layer {i} matrix {g} element {j}"),
                        got: a[j],
                        want: b[j],
                    }));
                }
            }
        }
    }
    Ok(None)
}

/// Worst relative error between analytic and central-difference gradients
/// over at most `samples` weights per matrix (evenly strided). `net` should
/// use float modes.
pub fn gradient_check(net: &NetworkSpec, seed: u64, samples: usize) -> f64 {
    let params = Params::init(net, seed);
    let batch = synthetic_batches(net, seed + 1, 1).remove(0);
    let mut e = Engine::new(net, 3, 32, seed);
    let fwd = e.forward(&params, &batch.x);
    let bwd = e.backward(&params, &fwd, &batch.target);
    let grads = e.weight_grads(&fwd, &bwd);
    // Small enough that max-pool winners rarely switch inside [w-h, w+h].
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (li, mats) in params.layers.iter().enumerate() {
        for (mi, w) in mats.iter().enumerate() {
            let stride = w.len().div_ceil(samples.max(1)).max(1);
            for k in (0..w.len()).step_by(stride) {
                let mut p = params.clone();
                p.layers[li][mi][k] += h;
                let f = e.forward(&p, &batch.x);
                let lp = e.loss(&f, &batch.target);
                p.layers[li][mi][k] -= 2.0 * h;
                let f = e.forward(&p, &batch.x);
                let lm = e.loss(&f, &batch.target);
                let num = (lp - lm) / (2.0 * h);
                let ana = grads[li][mi][k];
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-3));
            }
        }
    }
    worst
}
