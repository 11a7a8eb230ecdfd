//! Line-oriented network description format.
//!
//! ```text
//! # comment
//! conv in_w=32 in_h=32 in_d=3 kernels=16 kw=3 kh=3 pad=1
//! act fn=relu
//! maxpool radius=2
//! fc in=4096 out=10
//! loss fn=softmax_ce
//! train batch=32 lr=0.01 modes=ff:fixed16,bp:fixed32sr,up:fixed32sr
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    ActFn, CellKind, ConvSpec, LayerKind, LayerSpec, LossKind, NetError, NetworkSpec, Shape, TrainSpec,
};
use crate::fxnum::NumericMode;

struct Fields<'a> {
    line: usize,
    kind: &'a str,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, kind: &'a str, toks: &[&'a str], allowed: &[&str]) -> Result<Self, NetError> {
        let mut map = BTreeMap::new();
        for t in toks {
            let (k, v) = t.split_once('=').ok_or_else(|| NetError::Syntax {
                line,
                msg: format!("expected key=value, found `{t}`"),
            })?;
            if !allowed.contains(&k) {
                return Err(NetError::Syntax {
                    line,
                    msg: format!("unknown key `{k}` for `{kind}` (allowed: {})", allowed.join(", ")),
                });
            }
            if map.insert(k, v).is_some() {
                return Err(NetError::Syntax { line, msg: format!("duplicate key `{k}`") });
            }
        }
        Ok(Self { line, kind, map })
    }

    fn err(&self, msg: String) -> NetError {
        NetError::Syntax { line: self.line, msg }
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>, NetError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| self.err(format!("`{key}` must be a non-negative integer, found `{v}`"))),
        }
    }

    fn usize(&self, key: &str) -> Result<usize, NetError> {
        self.opt_usize(key)?
            .ok_or_else(|| self.err(format!("`{}` requires `{key}`", self.kind)))
    }

    fn positive(&self, key: &str) -> Result<usize, NetError> {
        let v = self.usize(key)?;
        if v == 0 {
            return Err(self.err(format!("`{key}` must be at least 1")));
        }
        Ok(v)
    }

    fn word(&self, key: &str) -> Result<&'a str, NetError> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| self.err(format!("`{}` requires `{key}`", self.kind)))
    }
}

fn parse_layer(line: usize, kind: &str, toks: &[&str]) -> Result<LayerKind, NetError> {
    match kind {
        "conv" => {
            let f = Fields::new(
                line,
                kind,
                toks,
                &["in_w", "in_h", "in_d", "kernels", "kw", "kh", "pad", "stride"],
            )?;
            if let Some(s) = f.opt_usize("stride")? {
                if s != 1 {
                    return Err(f.err(format!("only stride=1 is supported, found {s}")));
                }
            }
            let kw = f.positive("kw")?;
            let kh = f.positive("kh")?;
            if kw != kh || kw % 2 == 0 {
                return Err(f.err(format!("kernel must be square with odd size, found {kw}x{kh}")));
            }
            let pad = f.opt_usize("pad")?.unwrap_or((kw - 1) / 2);
            if pad != (kw - 1) / 2 {
                return Err(f.err(format!("pad radius must be (kw-1)/2 = {}, found {pad}", (kw - 1) / 2)));
            }
            Ok(LayerKind::Conv(ConvSpec {
                in_w: f.positive("in_w")?,
                in_h: f.positive("in_h")?,
                in_d: f.positive("in_d")?,
                kernels: f.positive("kernels")?,
                kw,
                kh,
                pad,
            }))
        }
        "maxpool" => {
            let f = Fields::new(line, kind, toks, &["radius"])?;
            Ok(LayerKind::MaxPool { radius: f.positive("radius")? })
        }
        "fc" => {
            let f = Fields::new(line, kind, toks, &["in", "out"])?;
            Ok(LayerKind::Fc { input: f.positive("in")?, output: f.positive("out")? })
        }
        "recurrent" => {
            let f = Fields::new(line, kind, toks, &["in", "hidden", "steps", "cell"])?;
            let cell = match f.map.get("cell").copied().unwrap_or("elman") {
                "elman" => CellKind::Elman,
                "gru" => CellKind::Gru,
                other => return Err(f.err(format!("unknown cell `{other}` (elman, gru)"))),
            };
            Ok(LayerKind::Recurrent {
                input: f.positive("in")?,
                hidden: f.positive("hidden")?,
                steps: f.positive("steps")?,
                cell,
            })
        }
        "act" => {
            let f = Fields::new(line, kind, toks, &["fn"])?;
            let a = match f.word("fn")? {
                "relu" => ActFn::Relu,
                "tanh" => ActFn::Tanh,
                "sigmoid" => ActFn::Sigmoid,
                other => return Err(f.err(format!("unknown activation `{other}` (relu, tanh, sigmoid)"))),
            };
            Ok(LayerKind::Activation(a))
        }
        "loss" => {
            let f = Fields::new(line, kind, toks, &["fn"])?;
            let l = match f.word("fn")? {
                "mse" => LossKind::Mse,
                "softmax_ce" => LossKind::SoftmaxCe,
                other => return Err(f.err(format!("unknown loss `{other}` (mse, softmax_ce)"))),
            };
            Ok(LayerKind::Loss(l))
        }
        other => Err(NetError::Syntax { line, msg: format!("unknown layer kind `{other}`") }),
    }
}

fn parse_train(line: usize, toks: &[&str]) -> Result<TrainSpec, NetError> {
    let f = Fields::new(line, "train", toks, &["batch", "lr", "modes"])?;
    let mut t = TrainSpec::default();
    if let Some(b) = f.opt_usize("batch")? {
        t.batch = b;
    }
    if let Some(v) = f.map.get("lr") {
        t.lr = v.parse().map_err(|_| f.err(format!("`lr` must be a number, found `{v}`")))?;
    }
    if let Some(v) = f.map.get("modes") {
        for item in v.split(',') {
            let (phase, mode) = item
                .split_once(':')
                .ok_or_else(|| f.err(format!("expected phase:mode, found `{item}`")))?;
            let m: NumericMode = mode.parse().map_err(|e| f.err(format!("{e}")))?;
            match phase {
                "ff" => t.ff = m,
                "bp" => t.bp = m,
                "up" => t.up = m,
                other => return Err(f.err(format!("unknown phase `{other}` (ff, bp, up)"))),
            }
        }
    }
    Ok(t)
}

pub fn parse_network(text: &str) -> Result<NetworkSpec, NetError> {
    let mut kinds = Vec::new();
    let mut lines = Vec::new();
    let mut train = None;
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks[0] == "train" {
            if train.is_some() {
                return Err(NetError::Syntax { line, msg: "duplicate `train` block".into() });
            }
            train = Some(parse_train(line, &toks[1..])?);
            continue;
        }
        kinds.push(parse_layer(line, toks[0], &toks[1..])?);
        lines.push(line);
    }
    if kinds.is_empty() {
        return Err(NetError::Syntax { line: last_line.max(1), msg: "no layers declared".into() });
    }
    let layers = build_layers(&kinds)?;
    let net = NetworkSpec { layers, train: train.unwrap_or_default() };
    net.check_train()?;
    Ok(net)
}

fn shape_err(kinds: &[LayerKind], a: usize, a_out: Shape, b: usize, b_in: String) -> NetError {
    NetError::Shape {
        a,
        a_kind: kinds[a].keyword().into(),
        a_out: a_out.to_string(),
        b,
        b_kind: kinds[b].keyword().into(),
        b_in,
    }
}

/// Validate the chain and derive every layer's input and output shape.
pub(super) fn build_layers(kinds: &[LayerKind]) -> Result<Vec<LayerSpec>, NetError> {
    let n = kinds.len();
    match kinds.last() {
        Some(LayerKind::Loss(_)) => {}
        _ => {
            return Err(NetError::Invalid {
                layer: n.saturating_sub(1),
                msg: "the last layer must be a loss".into(),
            })
        }
    }
    if n < 2 {
        return Err(NetError::Invalid { layer: 0, msg: "a loss needs a preceding layer".into() });
    }
    let mut out: Vec<LayerSpec> = Vec::with_capacity(n);
    for (i, &kind) in kinds.iter().enumerate() {
        let prev = out.last().map(|l| l.output);
        let invalid = |msg: &str| NetError::Invalid { layer: i, msg: msg.into() };
        let (input, output) = match kind {
            LayerKind::Conv(c) => {
                if c.out_w() == 0 || c.out_h() == 0 {
                    return Err(invalid("kernel larger than padded input"));
                }
                let input = Shape::Volume { d: c.in_d, h: c.in_h, w: c.in_w };
                if let Some(p) = prev {
                    if p != input {
                        return Err(shape_err(kinds, i - 1, p, i, input.to_string()));
                    }
                }
                (input, Shape::Volume { d: c.kernels, h: c.out_h(), w: c.out_w() })
            }
            LayerKind::MaxPool { radius } => {
                let p = prev.ok_or_else(|| invalid("pooling cannot be the first layer"))?;
                match p {
                    Shape::Volume { d, h, w } if h % radius == 0 && w % radius == 0 => {
                        (p, Shape::Volume { d, h: h / radius, w: w / radius })
                    }
                    _ => {
                        return Err(shape_err(
                            kinds,
                            i - 1,
                            p,
                            i,
                            format!("volume with sides divisible by {radius}"),
                        ))
                    }
                }
            }
            LayerKind::Fc { input, output } => {
                if let Some(p) = prev {
                    if p.len() != input {
                        return Err(shape_err(kinds, i - 1, p, i, format!("{input} elements")));
                    }
                }
                (Shape::Vector(input), Shape::Vector(output))
            }
            LayerKind::Recurrent { input, hidden, steps, .. } => {
                if let Some(p) = prev {
                    if p.len() != input * steps {
                        return Err(shape_err(
                            kinds,
                            i - 1,
                            p,
                            i,
                            format!("{} elements ({input} x {steps} steps)", input * steps),
                        ));
                    }
                }
                (Shape::Vector(input * steps), Shape::Vector(hidden))
            }
            LayerKind::Activation(_) => {
                let p = prev.ok_or_else(|| invalid("activation cannot be the first layer"))?;
                match kinds[i - 1] {
                    LayerKind::Conv(_) | LayerKind::Fc { .. } => {}
                    _ => return Err(invalid("activation must directly follow a conv or fc layer")),
                }
                (p, p)
            }
            LayerKind::Loss(_) => {
                if i != n - 1 {
                    return Err(invalid("loss must be the last layer"));
                }
                let p = prev.expect("checked above");
                (p, p)
            }
        };
        out.push(LayerSpec { kind, input, output });
    }
    Ok(out)
}

pub fn render_network(net: &NetworkSpec) -> String {
    let mut s = String::new();
    for l in &net.layers {
        match l.kind {
            LayerKind::Conv(c) => writeln!(
                s,
                "conv in_w={} in_h={} in_d={} kernels={} kw={} kh={} pad={}",
                c.in_w, c.in_h, c.in_d, c.kernels, c.kw, c.kh, c.pad
            ),
            LayerKind::MaxPool { radius } => writeln!(s, "maxpool radius={radius}"),
            LayerKind::Fc { input, output } => writeln!(s, "fc in={input} out={output}"),
            LayerKind::Recurrent { input, hidden, steps, cell } => writeln!(
                s,
                "recurrent in={input} hidden={hidden} steps={steps} cell={}",
                cell.keyword()
            ),
            LayerKind::Activation(a) => writeln!(s, "act fn={}", a.keyword()),
            LayerKind::Loss(k) => writeln!(s, "loss fn={}", k.keyword()),
        }
        .expect("writing to a String");
    }
    let t = &net.train;
    writeln!(
        s,
        "train batch={} lr={} modes=ff:{},bp:{},up:{}",
        t.batch, t.lr, t.ff, t.bp, t.up
    )
    .expect("writing to a String");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_conv_keeps_dims() {
        let net = parse_network("conv in_w=32 in_h=32 in_d=3 kernels=16 kw=3 kh=3 pad=1\nloss fn=mse\n").unwrap();
        assert_eq!(net.layers[0].output, Shape::Volume { d: 16, h: 32, w: 32 });
        assert_eq!(net.train, TrainSpec::default());
    }

    #[test]
    fn fc_into_conv_is_shape_error() {
        let e = parse_network("fc in=128 out=10\nconv in_w=4 in_h=4 in_d=1 kernels=1 kw=1 kh=1\nloss fn=mse\n")
            .unwrap_err();
        match e {
            NetError::Shape { a, b, a_kind, b_kind, .. } => {
                assert_eq!((a, b), (0, 1));
                assert_eq!((a_kind.as_str(), b_kind.as_str()), ("fc", "conv"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = parse_network("# header\n\nfc in=2 out=2 bias=1\nloss fn=mse\n").unwrap_err();
        assert!(matches!(e, NetError::Syntax { line: 3, .. }), "{e}");
    }

    #[test]
    fn stride_and_even_kernels_rejected() {
        assert!(parse_network("conv in_w=4 in_h=4 in_d=1 kernels=1 kw=3 kh=3 stride=2\nloss fn=mse").is_err());
        assert!(parse_network("conv in_w=4 in_h=4 in_d=1 kernels=1 kw=2 kh=2\nloss fn=mse").is_err());
        assert!(parse_network("conv in_w=4 in_h=4 in_d=1 kernels=1 kw=3 kh=3 pad=0\nloss fn=mse").is_err());
    }

    #[test]
    fn train_block() {
        let net = parse_network("fc in=2 out=2\nloss fn=mse\ntrain batch=8 lr=0.5 modes=ff:float,up:fixed32\n").unwrap();
        assert_eq!(net.train.batch, 8);
        assert_eq!(net.train.lr, 0.5);
        assert_eq!(net.train.ff, NumericMode::Float);
        assert_eq!(net.train.bp, NumericMode::Fixed32Sr);
        assert_eq!(net.train.up, NumericMode::Fixed32);
        assert!(parse_network("fc in=2 out=2\nloss fn=mse\ntrain modes=xx:float\n").is_err());
    }

    #[test]
    fn structural_rules() {
        assert!(parse_network("fc in=2 out=2\n").is_err());
        assert!(parse_network("loss fn=mse\nfc in=2 out=2\nloss fn=mse").is_err());
        assert!(parse_network("fc in=6 out=4\nrecurrent in=2 hidden=3 steps=2\nact fn=tanh\nloss fn=mse").is_err());
        assert!(parse_network("conv in_w=6 in_h=6 in_d=1 kernels=2 kw=3 kh=3\nmaxpool radius=4\nloss fn=mse").is_err());
        let net = parse_network("fc in=6 out=4\nrecurrent in=2 hidden=3 steps=2 cell=gru\nloss fn=mse").unwrap();
        assert_eq!(net.layers[1].input, Shape::Vector(4));
        assert_eq!(net.layers[1].output, Shape::Vector(3));
    }

    #[test]
    fn conv_to_fc_reshape_is_implicit() {
        let net = parse_network(
            "conv in_w=4 in_h=4 in_d=2 kernels=3 kw=3 kh=3\nact fn=relu\nmaxpool radius=2\nfc in=12 out=5\nloss fn=softmax_ce",
        )
        .unwrap();
        assert_eq!(net.layers[2].output, Shape::Volume { d: 3, h: 2, w: 2 });
        assert_eq!(net.activation_after(0), Some(ActFn::Relu));
        assert_eq!(net.producer(2), Some(0));
        assert_eq!(net.consumer(0), Some(2));
    }
}
