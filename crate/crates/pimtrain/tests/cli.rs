use std::path::Path;
use std::process::{Command, Output};

fn pimtrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimtrain")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn chain(dir: &Path, layers: usize) -> String {
    let mut s = "conv in_w=4 in_h=4 in_d=1 kernels=1 kw=3 kh=3 pad=1\n".repeat(layers);
    s.push_str("loss fn=mse\ntrain batch=1 lr=0.01\n");
    let p = dir.join(format!("chain{layers}.net"));
    std::fs::write(&p, s).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn compile_reports_ibuffer_use() {
    let o = pimtrain(&["compile", "--net", "alexnet"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    assert!(last.ends_with("of 16384 bytes used"), "{last}");
}

#[test]
fn single_layer_net_has_few_entries() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("one.net");
    std::fs::write(&p, "fc in=4 out=2\nloss fn=mse\ntrain batch=2\n").unwrap();
    let o = pimtrain(&["compile", "--net", p.to_str().unwrap()]);
    let out = stdout(&o);
    let entries: usize = out.lines().last().unwrap().split(", ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!((4..=6).contains(&entries), "{out}");
}

#[test]
fn oversized_program_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pimtrain(&["compile", "--net", &chain(tmp.path(), 187)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("capacity is 16384 B"));
    assert!(pimtrain(&["compile", "--net", &chain(tmp.path(), 180)]).status.success());
}

#[test]
fn bad_input_exit_codes() {
    assert_eq!(pimtrain(&["compile", "--net", "/no/such.net"]).status.code(), Some(1));
    assert_eq!(pimtrain(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pimtrain(&["compile", "--net", "mlp3", "--machine", "hmc9"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.net");
    std::fs::write(&p, "fc in=4 out=2\nfc in=3 out=2\nloss fn=mse\n").unwrap();
    assert_eq!(pimtrain(&["compile", "--net", p.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn train_writes_artifacts_and_rerun_reproduces_them() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let o = pimtrain(&["train", "--net", "cnn_rnn", "--seed", "3", "--batches", "2", "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "config.json", "ibuffer.bin", "loss.csv", "trace.csv", "weights.bin", "metrics.json", "metrics.txt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));
    assert!(std::fs::read_to_string(a.join("metrics.json")).unwrap().contains("\"seed\": 3"));
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2 * 29);

    let b = tmp.path().join("b");
    let o = pimtrain(&["rerun", a.join("manifest.json").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    for e in std::fs::read_dir(&a).unwrap() {
        let e = e.unwrap();
        assert_eq!(std::fs::read(e.path()).unwrap(), std::fs::read(b.join(e.file_name())).unwrap(), "{:?}", e.file_name());
    }
}

#[test]
fn mode_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |mode: &str| {
        let out = tmp.path().join(mode);
        let o = pimtrain(&["train", "--net", "mlp3", "--batches", "1", "--mode", mode, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read_to_string(out.join("network.net")).unwrap()
    };
    assert!(run("float").contains("modes=ff:float,bp:float,up:float"));
    assert!(run("fixed").contains("modes=ff:fixed16,bp:fixed32sr,up:fixed32sr"));
}

#[test]
fn verify_passes_on_bundled_nets() {
    for net in ["mlp3", "gru"] {
        let o = pimtrain(&["verify", "--net", net, "--batches", "1"]);
        assert!(o.status.success(), "{net}: {}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).ends_with("verify: PASS\n"));
    }
}

#[test]
fn scaleout_table() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("s.txt");
    let o = pimtrain(&["scaleout", "--modules", "4", "--out", f.to_str().unwrap()]);
    assert!(o.status.success());
    let t = std::fs::read_to_string(&f).unwrap();
    assert_eq!(t, stdout(&o));
    assert!(t.lines().last().unwrap().contains("269.58"));
    assert_eq!(pimtrain(&["scaleout", "--modules", "0"]).status.code(), Some(1));
}
