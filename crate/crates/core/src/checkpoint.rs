//! Sectioned text checkpoint format.
//!
//! ```text
//! lionrank-checkpoint 1
//! [meta]
//! name=<run>-<optimizer>-epoch<K>
//! epoch=<K>
//! global_step=<steps taken>
//! [config]
//! vocab_size=… d_model=… n_layers=… n_heads=… d_ff=… max_len=… seed=…   (one key per line)
//! [vocab <n>]
//! <one non-reserved token per line, in id order starting at 4>
//! [param <name> <d0>x<d1>…]
//! <values: one matrix row per line, space separated>
//! [optimizer lion|adamw]
//! <key=value hyperparameters; adamw adds step=<t>>
//! [state <buffer> <param name> <shape>]
//! <values, laid out like params; buffer is momentum, first or second>
//! [end]
//! ```
//!
//! Parameters appear in the model's canonical order and state buffers in
//! parameter order. Floats are written in Rust's shortest round-trip
//! exponent form, so `load(save(c))` reproduces every bit and saving a
//! loaded checkpoint yields identical bytes. The optimizer section is
//! optional.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{CrossEncoder, CrossEncoderConfig, ModelError, Vocab};
use crate::optim::{AdamWConfig, AdamWState, LionConfig, LionState, OptimError, Optimizer, StateBuffer};
use crate::tensor::{Parameter, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "lionrank-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A model snapshot with everything needed to score text or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub name: String,
    pub epoch: usize,
    pub global_step: u64,
    pub vocab: Vocab,
    pub model: CrossEncoder,
    pub optimizer: Option<Optimizer>,
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn write_values(out: &mut String, shape: &[usize], data: &[f64]) {
    let row = if shape.len() >= 2 {
        *shape.last().unwrap()
    } else {
        data.len()
    };
    if row == 0 {
        return;
    }
    for chunk in data.chunks(row) {
        let line: Vec<String> = chunk.iter().map(|x| format!("{x:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

fn join_patterns(p: &[String]) -> String {
    p.join(",")
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let cfg = self.model.config();
        let _ = writeln!(out, "{MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(
            out,
            "[meta]\nname={}\nepoch={}\nglobal_step={}",
            self.name, self.epoch, self.global_step
        );
        let _ = writeln!(
            out,
            "[config]\nvocab_size={}\nd_model={}\nn_layers={}\nn_heads={}\nd_ff={}\nmax_len={}\nseed={}",
            cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_len, cfg.seed
        );
        let words = self.vocab.words();
        let _ = writeln!(out, "[vocab {}]", words.len());
        for w in words {
            let _ = writeln!(out, "{w}");
        }
        for p in self.model.params() {
            let _ = writeln!(out, "[param {} {}]", p.name, shape_str(p.tensor.shape()));
            write_values(&mut out, p.tensor.shape(), p.tensor.data());
        }
        let write_buffers = |out: &mut String, kind: &str, bufs: &[StateBuffer]| {
            for b in bufs {
                let _ = writeln!(out, "[state {kind} {} {}]", b.name, shape_str(&b.shape));
                write_values(out, &b.shape, &b.data);
            }
        };
        match &self.optimizer {
            None => {}
            Some(Optimizer::Lion(s)) => {
                let c = &s.config;
                let _ = writeln!(
                    out,
                    "[optimizer lion]\nbeta1={:e}\nbeta2={:e}\nweight_decay={:e}\ndecay_exclude={}",
                    c.beta1,
                    c.beta2,
                    c.weight_decay,
                    join_patterns(&c.decay_exclude)
                );
                write_buffers(&mut out, "momentum", s.momentum());
            }
            Some(Optimizer::AdamW(s)) => {
                let c = &s.config;
                let _ = writeln!(
                    out,
                    "[optimizer adamw]\nbeta1={:e}\nbeta2={:e}\neps={:e}\nweight_decay={:e}\ndecay_exclude={}\nstep={}",
                    c.beta1,
                    c.beta2,
                    c.eps,
                    c.weight_decay,
                    join_patterns(&c.decay_exclude),
                    s.step_count()
                );
                write_buffers(&mut out, "first", s.first_moment());
                write_buffers(&mut out, "second", s.second_moment());
            }
        }
        out.push_str("[end]\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Reader::new(text).checkpoint()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(CheckpointError::Format {
            line: self.last,
            msg: msg.into(),
        })
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => self.err("unexpected end of file"),
        }
    }

    /// Reads a `[header]` line and returns its space-separated words.
    fn header(&mut self) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        match line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            Some(inner) => Ok(inner.split(' ').collect()),
            None => self.err(format!("expected a section header, found `{line}`")),
        }
    }

    fn expect_header(&mut self, want: &[&str]) -> Result<Vec<&'a str>> {
        let h = self.header()?;
        if h.len() < want.len() || h[..want.len()] != *want {
            return self.err(format!("expected [{}], found [{}]", want.join(" "), h.join(" ")));
        }
        Ok(h)
    }

    fn key<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.key_str(key)?;
        match raw.parse() {
            Ok(v) => Ok(v),
            Err(_) => self.err(format!("invalid value for `{key}`: `{raw}`")),
        }
    }

    fn key_str(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next_line()?;
        match line.split_once('=') {
            Some((k, v)) if k == key => Ok(v),
            _ => self.err(format!("expected `{key}=…`, found `{line}`")),
        }
    }

    fn parse_shape(&self, s: &str) -> Result<Vec<usize>> {
        if s == "scalar" {
            return Ok(Vec::new());
        }
        s.split('x')
            .map(|d| d.parse().or_else(|_| self.err(format!("bad shape `{s}`"))))
            .collect()
    }

    fn values(&mut self, shape: &[usize]) -> Result<Vec<f64>> {
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let line = self.next_line()?;
            for tok in line.split(' ') {
                match tok.parse::<f64>() {
                    Ok(v) => out.push(v),
                    Err(_) => return self.err(format!("bad number `{tok}`")),
                }
            }
        }
        if out.len() != n {
            return self.err(format!("expected {n} values, read {}", out.len()));
        }
        Ok(out)
    }

    fn buffers(&mut self, kind: &str, like: &[Parameter]) -> Result<Vec<StateBuffer>> {
        like.iter()
            .map(|p| {
                let h = self.expect_header(&["state", kind])?;
                if h.len() != 4 || h[2] != p.name {
                    return self.err(format!("expected {kind} buffer for `{}`", p.name));
                }
                let shape = self.parse_shape(h[3])?;
                let data = self.values(&shape)?;
                Ok(StateBuffer {
                    name: p.name.clone(),
                    shape,
                    data,
                })
            })
            .collect()
    }

    fn patterns(&mut self) -> Result<Vec<String>> {
        let raw = self.key_str("decay_exclude")?;
        Ok(raw.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
    }

    fn checkpoint(mut self) -> Result<Checkpoint> {
        let first = self.next_line()?;
        let version = match first.split_once(' ') {
            Some((MAGIC, v)) => v.parse::<u32>().or_else(|_| self.err("bad version"))?,
            _ => return self.err("not a lionrank checkpoint"),
        };
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }

        self.expect_header(&["meta"])?;
        let name = self.key_str("name")?.to_string();
        let epoch = self.key("epoch")?;
        let global_step = self.key("global_step")?;

        self.expect_header(&["config"])?;
        let config = CrossEncoderConfig {
            vocab_size: self.key("vocab_size")?,
            d_model: self.key("d_model")?,
            n_layers: self.key("n_layers")?,
            n_heads: self.key("n_heads")?,
            d_ff: self.key("d_ff")?,
            max_len: self.key("max_len")?,
            seed: self.key("seed")?,
        };
        config.validate()?;

        let h = self.expect_header(&["vocab"])?;
        let count: usize = match h.get(1).and_then(|c| c.parse().ok()) {
            Some(c) => c,
            None => return self.err("vocab header needs a count"),
        };
        let mut words = Vec::with_capacity(count);
        for _ in 0..count {
            words.push(self.next_line()?.to_string());
        }
        let vocab = Vocab::from_tokens(&words);
        if vocab.words() != words.as_slice() {
            return self.err("vocab entries must be unique and sorted");
        }

        let mut params = Vec::new();
        for _ in config.layout() {
            let h = self.expect_header(&["param"])?;
            if h.len() != 3 {
                return self.err("param header needs a name and a shape");
            }
            let shape = self.parse_shape(h[2])?;
            let data = self.values(&shape)?;
            let tensor = Tensor::new(&shape, data).expect("value count checked");
            params.push(Parameter::new(h[1], tensor));
        }
        let model = CrossEncoder::from_params(config, params)?;
        model.check_vocab(&vocab)?;

        let h = self.header()?;
        let optimizer = match h.as_slice() {
            ["end"] => None,
            ["optimizer", "lion"] => {
                let config = LionConfig {
                    beta1: self.key("beta1")?,
                    beta2: self.key("beta2")?,
                    weight_decay: self.key("weight_decay")?,
                    decay_exclude: self.patterns()?,
                };
                let momentum = self.buffers("momentum", model.params())?;
                Some(Optimizer::Lion(LionState::from_buffers(config, momentum)?))
            }
            ["optimizer", "adamw"] => {
                let config = AdamWConfig {
                    beta1: self.key("beta1")?,
                    beta2: self.key("beta2")?,
                    eps: self.key("eps")?,
                    weight_decay: self.key("weight_decay")?,
                    decay_exclude: self.patterns()?,
                };
                let step = self.key("step")?;
                let first = self.buffers("first", model.params())?;
                let second = self.buffers("second", model.params())?;
                Some(Optimizer::AdamW(AdamWState::from_buffers(config, step, first, second)?))
            }
            other => return self.err(format!("unexpected section [{}]", other.join(" "))),
        };
        if optimizer.is_some() {
            self.expect_header(&["end"])?;
        }
        if let Some((i, l)) = self.lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(CheckpointError::Format {
                line: i + 1,
                msg: format!("trailing content `{l}`"),
            });
        }
        Ok(Checkpoint {
            name,
            epoch,
            global_step,
            vocab,
            model,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(opt: Option<&str>) -> Checkpoint {
        let config = CrossEncoderConfig {
            vocab_size: 12,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 6,
            max_len: 8,
            seed: 31,
        };
        let model = CrossEncoder::new(config).unwrap();
        let mut params = model.params().to_vec();
        for p in &mut params {
            let g: Vec<f64> = p.tensor.data().iter().map(|x| x * 0.3 - 0.01).collect();
            p.tensor.zero_grad();
            p.tensor.accumulate_grad(&g);
        }
        let optimizer = opt.map(|o| {
            let mut opt = match o {
                "lion" => Optimizer::Lion(
                    LionState::new(
                        LionConfig {
                            decay_exclude: vec!["bias".into(), "gain".into()],
                            ..LionConfig::default()
                        },
                        &params,
                    )
                    .unwrap(),
                ),
                _ => Optimizer::AdamW(AdamWState::new(AdamWConfig::default(), &params).unwrap()),
            };
            opt.step(&mut params, 1e-3).unwrap();
            opt.step(&mut params, 1e-3).unwrap();
            opt
        });
        Checkpoint {
            name: "toy-lion-epoch2".into(),
            epoch: 2,
            global_step: 2,
            vocab: Vocab::from_tokens(["alpha", "beta", "gamma"]),
            model: CrossEncoder::from_params(config, params).unwrap(),
            optimizer,
        }
    }

    fn strip_grads(mut c: Checkpoint) -> Checkpoint {
        let params = c
            .model
            .params()
            .iter()
            .map(|p| {
                Parameter::new(
                    p.name.clone(),
                    Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).unwrap(),
                )
            })
            .collect();
        c.model = CrossEncoder::from_params(*c.model.config(), params).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for opt in [None, Some("lion"), Some("adamw")] {
            let c = strip_grads(sample(opt));
            let text = c.to_text();
            let back = Checkpoint::from_text(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn header_layout() {
        let text = sample(Some("adamw")).to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "lionrank-checkpoint 1");
        assert_eq!(lines[1], "[meta]");
        assert!(text.contains("[param embed.token 12x4]\n"));
        assert!(text.contains("[param head.bias 1]\n"));
        assert!(text.contains("[optimizer adamw]\n"));
        assert!(text.contains("step=2\n"));
        assert!(text.ends_with("[end]\n"));
    }

    #[test]
    fn corrupt_input_reports_line() {
        let text = sample(None).to_text().replacen("d_model=4", "d_model=four", 1);
        match Checkpoint::from_text(&text) {
            Err(CheckpointError::Format { line, .. }) => assert_eq!(line, 8),
            other => panic!("unexpected {other:?}"),
        }
        let text = sample(None)
            .to_text()
            .replace("lionrank-checkpoint 1", "lionrank-checkpoint 9");
        assert!(matches!(Checkpoint::from_text(&text), Err(CheckpointError::Version(9))));
        let truncated: String = sample(None).to_text().lines().take(30).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
    }

    proptest! {
        #[test]
        fn float_text_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let s = format!("{x:e}");
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), bits);
        }
    }
}
