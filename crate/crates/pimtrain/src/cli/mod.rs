//! Command-line front end: compile, train, verify and scale-out sweeps.
//!
//! Exit codes: 0 success, 1 user error (bad input, capacity), 2 internal
//! invariant violation (deadlock, oracle mismatch).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::compiler::{self, CompileError};
use crate::fxnum::NumericMode;
use crate::goldref::{synthetic_batches, write_snapshot};
use crate::machine::{run_training, trace_csv, MachineConfig, MachineError};
use crate::metrics::{self, ScaleOutParams};
use crate::netspec::{parse_network, render_network, ActFn, LayerKind, NetworkSpec, TrainSpec};
use crate::verify;

/// Bundled desk-scale benchmarks, addressable as `--net <name>`.
pub const BENCHES: [(&str, &str); 5] = [
    ("alexnet", include_str!("../../nets/alexnet.net")),
    ("mlp3", include_str!("../../nets/mlp3.net")),
    ("gru", include_str!("../../nets/gru.net")),
    ("cnn_rnn", include_str!("../../nets/cnn_rnn.net")),
    ("alexnet_full", include_str!("../../nets/alexnet_full.net")),
];

/// Benchmarks too large for a quick desk run.
pub const LONG_RUNNING: [&str; 1] = ["alexnet_full"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> Self {
        match e {
            CompileError::Internal(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<MachineError> for CliError {
    fn from(e: MachineError) -> Self {
        match e {
            MachineError::Compile(c) => c.into(),
            MachineError::Input(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::User(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "pimtrain", version, about = "Compiler and cycle-level simulator for an in-memory DNN training accelerator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compile a network and dump the program tables and iBuffer image.
    Compile(CompileArgs),
    /// Train on seeded synthetic data and write a run artifact directory.
    Train(TrainArgs),
    /// Repeat a recorded training run from its manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the address-stream, bit-match and gradient oracles on a network.
    Verify(VerifyArgs),
    /// Multi-module latency and throughput versus module count.
    Scaleout(ScaleoutArgs),
    /// List the bundled benchmark networks.
    Benches,
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    /// Network file or bundled benchmark name.
    #[arg(long)]
    pub net: String,
    /// Machine preset (hmc1, hmc2) or JSON config file.
    #[arg(long, default_value = "hmc1")]
    pub machine: String,
}

#[derive(Args, Debug)]
pub struct CompileArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Directory for program.txt, layout.txt and ibuffer.bin.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Minibatches of synthetic data per epoch.
    #[arg(long, default_value_t = 4)]
    pub batches: usize,
    /// float, fixed (16-bit FF, 32-bit SR BP/UP), or one mode for all
    /// phases: fixed16, fixed32, fixed32sr, fixed32srlo. Defaults to the
    /// modes in the network file.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minibatches for the machine vs reference comparison.
    #[arg(long, default_value_t = 2)]
    pub batches: usize,
}

#[derive(Args, Debug)]
pub struct ScaleoutArgs {
    /// Largest module count in the sweep.
    #[arg(long, default_value_t = 8)]
    pub modules: usize,
    /// Single-module minibatch latency in ms (default: VGG16 example).
    #[arg(long)]
    pub t1_ms: Option<f64>,
    #[arg(long)]
    pub t_up_ms: Option<f64>,
    #[arg(long)]
    pub t_link_ms: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to repeat a training run. The output directory is not
/// recorded so that repeated runs produce identical directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Where the network came from, as given.
    pub net_source: String,
    /// Network text after any mode override.
    pub network: String,
    pub machine: String,
    pub seed: u64,
    pub epochs: usize,
    pub batches: usize,
    pub mode: Option<String>,
}

pub fn net_text(spec: &str) -> Result<String, CliError> {
    if let Some((_, t)) = BENCHES.iter().find(|(n, _)| *n == spec) {
        return Ok(t.to_string());
    }
    let p = Path::new(spec);
    fs::read_to_string(p).map_err(|e| {
        let names: Vec<&str> = BENCHES.iter().map(|b| b.0).collect();
        CliError::User(format!("network '{spec}': {e} (bundled: {})", names.join(", ")))
    })
}

fn load_net(spec: &str) -> Result<NetworkSpec, CliError> {
    parse_network(&net_text(spec)?).map_err(|e| CliError::User(format!("{spec}: {e}")))
}

fn load_machine(spec: &str) -> Result<MachineConfig, CliError> {
    MachineConfig::load(spec).map_err(CliError::User)
}

pub fn apply_mode(train: TrainSpec, mode: &str) -> Result<TrainSpec, CliError> {
    match mode {
        "fixed" => {
            let d = TrainSpec::default();
            Ok(TrainSpec { ff: d.ff, bp: d.bp, up: d.up, ..train })
        }
        m => m
            .parse::<NumericMode>()
            .map(|m| train.with_modes(m))
            .map_err(|_| CliError::User(format!("unknown mode '{m}'"))),
    }
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| io_err(&p, e))
}

fn json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::Internal(e.to_string()))
}

pub fn cmd_compile(a: &CompileArgs) -> Result<String, CliError> {
    let net = load_net(&a.net.net)?;
    let cfg = load_machine(&a.net.machine)?;
    let c = compiler::compile(&net, &cfg)?;
    let table = compiler::dump_table(&c);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write(dir, "program.txt", &table)?;
        write(dir, "layout.txt", compiler::footprint_report(&net, &c.layout))?;
        write(dir, "ibuffer.bin", &c.image.bytes)?;
    }
    Ok(format!(
        "{table}{} steps, {} iBuffer entries, {} of {} bytes used\n",
        c.steps.len(),
        c.image.entries,
        c.image.bytes.len(),
        c.image.capacity
    ))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String, CliError> {
    let m = RunManifest {
        command: "train".into(),
        net_source: a.net.net.clone(),
        network: net_text(&a.net.net)?,
        machine: a.net.machine.clone(),
        seed: a.seed,
        epochs: a.epochs,
        batches: a.batches,
        mode: a.mode.clone(),
    };
    train_manifest(m, &a.out)
}

pub fn cmd_rerun(manifest: &Path, out: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(manifest).map_err(|e| io_err(manifest, e))?;
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", manifest.display())))?;
    train_manifest(m, out)
}

fn train_manifest(mut m: RunManifest, out: &Path) -> Result<String, CliError> {
    let mut net = parse_network(&m.network).map_err(|e| CliError::User(format!("{}: {e}", m.net_source)))?;
    if let Some(mode) = &m.mode {
        net.train = apply_mode(net.train, mode)?;
    }
    m.network = render_network(&net);
    let cfg = load_machine(&m.machine)?;
    if m.batches == 0 {
        return Err(CliError::User("need at least one minibatch".into()));
    }
    let c = compiler::compile(&net, &cfg)?;
    let data = synthetic_batches(&net, m.seed, m.batches);
    let run = run_training(&net, &data, m.epochs, &cfg, m.seed)?;

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(out, "manifest.json", json(&m)?)?;
    write(out, "config.json", json(&cfg)?)?;
    write(out, "network.net", &m.network)?;
    write(out, "program.txt", compiler::dump_table(&c))?;
    write(out, "ibuffer.bin", &c.image.bytes)?;
    let mut loss = String::from("batch,loss\n");
    for (i, l) in run.losses.iter().enumerate() {
        loss.push_str(&format!("{i},{l:.9}\n"));
    }
    write(out, "loss.csv", loss)?;
    write(out, "trace.csv", trace_csv(&run.traces))?;
    write(out, "weights.bin", write_snapshot(&run.params.to_tensors(&net)))?;
    let report = metrics::report(&run.traces, &cfg);
    #[derive(Serialize)]
    struct Metrics<'a> {
        seed: u64,
        final_loss: f64,
        report: &'a metrics::Report,
    }
    let final_loss = run.losses.last().copied().unwrap_or(f64::NAN);
    write(out, "metrics.json", json(&Metrics { seed: m.seed, final_loss, report: &report })?)?;
    let text = format!("seed {}\n{}", m.seed, report.text());
    write(out, "metrics.txt", &text)?;
    Ok(format!("{text}final loss {final_loss:.6}\nwrote {}\n", out.display()))
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<String, CliError> {
    let net = load_net(&a.net.net)?;
    let cfg = load_machine(&a.net.machine)?;
    let mut s = String::new();
    let mut failed = Vec::new();

    let results = verify::address_oracle(&net, &cfg)?;
    let bad: Vec<_> = results.iter().filter(|r| !r.ok).collect();
    s.push_str(&format!("address streams: {}/{} steps match", results.len() - bad.len(), results.len()));
    let c = compiler::compile(&net, &cfg)?;
    let uncovered = c.steps.iter().filter(|st| !verify::oracle_covers(&net, st)).count();
    if uncovered > 0 {
        s.push_str(&format!(" ({uncovered} recurrent-layer steps have no reference)"));
    }
    s.push('\n');
    for r in &bad {
        s.push_str(&format!("  {} ({}): {}\n", r.step, r.op, r.detail));
        failed.push(format!("address stream {}", r.step));
    }

    for mode in [NumericMode::Float, NumericMode::Fixed32] {
        let mut n = net.clone();
        n.train = n.train.with_modes(mode);
        match verify::machine_vs_reference(&n, &cfg, a.seed, a.batches, 0.0)? {
            None => s.push_str(&format!("{mode} machine vs reference: bit-exact over {} minibatches\n", a.batches)),
            Some(mm) => {
                s.push_str(&format!("{mode} machine vs reference: {mm:?}\n"));
                failed.push(format!("{mode} bit-match"));
            }
        }
    }

    // Finite differences straddle ReLU kinks; check a tanh copy instead.
    let mut fnet = net.clone();
    fnet.train = fnet.train.with_modes(NumericMode::Float);
    let mut smoothed = false;
    for l in &mut fnet.layers {
        if l.kind == LayerKind::Activation(ActFn::Relu) {
            l.kind = LayerKind::Activation(ActFn::Tanh);
            smoothed = true;
        }
    }
    let worst = verify::gradient_check(&fnet, a.seed, 64);
    let note = if smoothed { " (relu replaced by tanh)" } else { "" };
    s.push_str(&format!("gradient check{note}: worst relative error {worst:.2e}\n"));
    if worst.is_nan() || worst >= 1e-4 {
        failed.push("gradient check".into());
    }

    if failed.is_empty() {
        s.push_str("verify: PASS\n");
        Ok(s)
    } else {
        Err(CliError::Internal(format!("{s}verify: FAIL ({})", failed.join(", "))))
    }
}

pub fn cmd_scaleout(a: &ScaleoutArgs) -> Result<String, CliError> {
    let d = ScaleOutParams::vgg16(1);
    let base = ScaleOutParams {
        modules: 1,
        t1: a.t1_ms.map_or(d.t1, |v| v * 1e-3),
        t_up: a.t_up_ms.map_or(d.t_up, |v| v * 1e-3),
        t_link: a.t_link_ms.map_or(d.t_link, |v| v * 1e-3),
        batch: a.batch.unwrap_or(d.batch),
    };
    if a.modules == 0 || base.t1 <= 0.0 || base.t_up < 0.0 || base.t_link < 0.0 {
        return Err(CliError::User("need modules >= 1, t1 > 0 and non-negative update/link times".into()));
    }
    let table = metrics::scaleout_table(&metrics::scaleout_sweep(&base, a.modules));
    if let Some(p) = &a.out {
        fs::write(p, &table).map_err(|e| io_err(p, e))?;
    }
    Ok(table)
}

pub fn cmd_benches() -> String {
    let mut s = String::new();
    for (name, text) in BENCHES {
        let long = if LONG_RUNNING.contains(&name) { "  (long-running)" } else { "" };
        let layers = parse_network(text).map(|n| n.layers.len()).unwrap_or(0);
        s.push_str(&format!("{name:<14} {layers:>3} layers{long}\n"));
    }
    s
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Compile(a) => cmd_compile(a),
        Command::Train(a) => cmd_train(a),
        Command::Rerun { manifest, out } => cmd_rerun(manifest, out),
        Command::Verify(a) => cmd_verify(a),
        Command::Scaleout(a) => cmd_scaleout(a),
        Command::Benches => Ok(cmd_benches()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_nets_parse() {
        for (name, text) in BENCHES {
            assert!(parse_network(text).is_ok(), "{name}");
        }
    }

    #[test]
    fn mode_override() {
        let t = TrainSpec::default().with_modes(NumericMode::Float);
        assert_eq!(apply_mode(t, "fixed").unwrap(), TrainSpec { lr: t.lr, batch: t.batch, ..TrainSpec::default() });
        assert_eq!(apply_mode(t, "fixed32").unwrap().bp, NumericMode::Fixed32);
        assert_eq!(apply_mode(t, "nope").unwrap_err().exit_code(), 1);
    }

    #[test]
    fn unknown_net_is_user_error() {
        let e = load_net("/nonexistent/x.net").unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn capacity_error_is_user_error() {
        let e: CliError =
            CompileError::IBuffer { needed: 16456, capacity: 16384, entries: 748 }.into();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn scaleout_default_matches_example() {
        let a = ScaleoutArgs { modules: 4, t1_ms: None, t_up_ms: None, t_link_ms: None, batch: None, out: None };
        let t = cmd_scaleout(&a).unwrap();
        assert!(t.lines().nth(4).unwrap().contains("269.58"), "{t}");
    }
}
