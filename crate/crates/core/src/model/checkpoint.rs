//! Self-describing text checkpoints.
//!
//! ```text
//! sdebias-checkpoint v1
//! feature_len=192
//! ...                      (dimensions, shortcut mode, caller metadata)
//! tensor enc.w1 192 256
//! <values>
//! ```
//!
//! Values use Rust's shortest round-trip exponent form, so a checkpoint
//! reads back bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{FairModel, ModelConfig, ShortcutBank, ShortcutMode};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "sdebias-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FairModel,
    pub bank: Option<ShortcutBank>,
    /// Free-form header entries (training mode, seed, config hash).
    pub meta: BTreeMap<String, String>,
}

fn write_tensor(out: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    writeln!(out, "tensor {name} {}", dims.join(" "))?;
    let mut line = String::with_capacity(t.len() * 24);
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        write!(line, "{v:e}").expect("write to String");
    }
    line.push('\n');
    out.write_all(line.as_bytes())?;
    Ok(())
}

pub fn write_checkpoint(ck: &Checkpoint, mut out: impl Write) -> Result<()> {
    let c = &ck.model.config;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "feature_len={}", c.feature_len)?;
    writeln!(out, "hidden={}", c.hidden)?;
    writeln!(out, "repr_dim={}", c.repr_dim)?;
    writeln!(out, "num_targets={}", c.num_targets)?;
    writeln!(out, "num_bias={}", c.num_bias)?;
    writeln!(out, "shortcut_dim={}", c.shortcut_dim)?;
    writeln!(out, "shortcut_mode={}", c.shortcut_mode.name())?;
    writeln!(out, "adversary={}", u8::from(c.adversary))?;
    for (k, v) in &ck.meta {
        writeln!(out, "meta.{k}={v}")?;
    }
    for (name, t) in ck.model.named_params() {
        write_tensor(&mut out, name, t)?;
    }
    if let Some(bank) = &ck.bank {
        writeln!(out, "bank.trainable={}", u8::from(bank.trainable))?;
        write_tensor(&mut out, "bank.vectors", &bank.vectors)?;
        write_tensor(&mut out, "bank.anchor", &bank.anchor)?;
    }
    Ok(())
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn read_checkpoint(input: impl BufRead) -> Result<Checkpoint> {
    let mut header = BTreeMap::new();
    let mut meta = BTreeMap::new();
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut lines = input.lines().enumerate();

    match lines.next() {
        Some((_, Ok(l))) if l == MAGIC => {}
        _ => return Err(bad(1, "missing checkpoint magic line")),
    }
    while let Some((i, line)) = lines.next() {
        let line = line?;
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| bad(lineno, "tensor without name"))?;
            let shape = parts
                .map(|d| d.parse::<usize>().map_err(|_| bad(lineno, "bad dimension")))
                .collect::<Result<Vec<_>>>()?;
            let (_, values) = lines
                .next()
                .ok_or_else(|| bad(lineno, "missing tensor values"))?;
            let data = values?
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| bad(lineno + 1, format!("bad value {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            tensors.insert(name.to_string(), Tensor::new(shape, data)?);
        } else if let Some((k, v)) = line.split_once('=') {
            match k.strip_prefix("meta.") {
                Some(mk) => meta.insert(mk.to_string(), v.to_string()),
                None => header.insert(k.to_string(), v.to_string()),
            };
        } else if !line.trim().is_empty() {
            return Err(bad(lineno, format!("unexpected line {line:?}")));
        }
    }

    let num = |k: &str| -> Result<usize> {
        header
            .get(k)
            .ok_or_else(|| bad(0, format!("missing header {k}")))?
            .parse()
            .map_err(|_| bad(0, format!("bad header {k}")))
    };
    let config = ModelConfig {
        feature_len: num("feature_len")?,
        hidden: num("hidden")?,
        repr_dim: num("repr_dim")?,
        num_targets: num("num_targets")?,
        num_bias: num("num_bias")?,
        shortcut_dim: num("shortcut_dim")?,
        shortcut_mode: ShortcutMode::parse(header.get("shortcut_mode").map_or("", String::as_str))?,
        adversary: num("adversary")? == 1,
    };
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| bad(0, format!("missing tensor {name}")))
    };
    let model = FairModel {
        enc_w1: take("enc.w1")?,
        enc_b1: take("enc.b1")?,
        enc_w2: take("enc.w2")?,
        enc_b2: take("enc.b2")?,
        head_w: take("head.w")?,
        head_b: take("head.b")?,
        bias_head: if config.adversary {
            Some((take("adv.w")?, take("adv.b")?))
        } else {
            None
        },
        config,
    };
    let bank = if model.has_shortcuts() {
        Some(ShortcutBank {
            vectors: take("bank.vectors")?,
            anchor: take("bank.anchor")?,
            trainable: num("bank.trainable")? == 1,
        })
    } else {
        None
    };
    check_shapes(&model, bank.as_ref())?;
    Ok(Checkpoint { model, bank, meta })
}

fn check_shapes(m: &FairModel, bank: Option<&ShortcutBank>) -> Result<()> {
    let c = &m.config;
    let mut expected = vec![
        (&m.enc_w1, vec![c.feature_len, c.hidden]),
        (&m.enc_b1, vec![c.hidden]),
        (&m.enc_w2, vec![c.hidden, c.repr_dim]),
        (&m.enc_b2, vec![c.repr_dim]),
        (&m.head_w, vec![c.head_in(), c.num_targets]),
        (&m.head_b, vec![c.num_targets]),
    ];
    if let Some((w, b)) = &m.bias_head {
        expected.push((w, vec![c.repr_dim, c.num_bias]));
        expected.push((b, vec![c.num_bias]));
    }
    if let Some(bank) = bank {
        expected.push((&bank.vectors, vec![c.num_bias, c.shortcut_dim]));
        expected.push((&bank.anchor, vec![c.shortcut_dim]));
    }
    for (t, shape) in expected {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
    }
    Ok(())
}
