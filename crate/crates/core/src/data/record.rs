//! Plain-text dataset records.
//!
//! ```text
//! num_targets,num_bias,feature_len,n
//! t,b,v1,...,vk
//! ```
//!
//! Feature values are written with six decimals; reading and re-writing a
//! file reproduces it byte for byte. Lines starting with `#` before the
//! header are skipped by the reader.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{Dataset, Example};
use crate::error::{Error, Result};

pub fn write_records(d: &Dataset, mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "{},{},{},{}",
        d.num_targets,
        d.num_bias,
        d.feature_len,
        d.len()
    )?;
    let mut line = String::new();
    for ex in &d.examples {
        line.clear();
        write!(line, "{},{}", ex.target, ex.bias).expect("write to String");
        for v in &ex.features {
            write!(line, ",{v:.6}").expect("write to String");
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what}: {s:?}"),
    })
}

pub fn read_records(input: impl BufRead, provenance: &str, seed: u64) -> Result<Dataset> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (header_line, header) = loop {
        let (no, line) = lines.next().ok_or(Error::Empty("record file"))?;
        let line = line?;
        if !line.starts_with('#') {
            break (no, line);
        }
    };
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: header_line,
            msg: "header must be num_targets,num_bias,feature_len,n".into(),
        });
    }
    let num_targets: usize = parse(fields[0], header_line, "num_targets")?;
    let num_bias: usize = parse(fields[1], header_line, "num_bias")?;
    let feature_len: usize = parse(fields[2], header_line, "feature_len")?;
    let n: usize = parse(fields[3], header_line, "n")?;

    let mut examples = Vec::with_capacity(n);
    for (lineno, line) in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let target: usize = parse(parts.next().unwrap_or(""), lineno, "target")?;
        let bias: usize = parse(parts.next().unwrap_or(""), lineno, "bias")?;
        let features = parts
            .map(|v| parse::<f64>(v, lineno, "feature"))
            .collect::<Result<Vec<_>>>()?;
        if features.len() != feature_len || target >= num_targets || bias >= num_bias.max(1) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "expected {feature_len} features and labels within ({num_targets}, {num_bias})"
                ),
            });
        }
        examples.push(Example {
            features,
            target,
            bias,
        });
    }
    if examples.len() != n {
        return Err(Error::Parse {
            line: examples.len() + 1,
            msg: format!("header declares {n} examples, found {}", examples.len()),
        });
    }
    Ok(Dataset {
        examples,
        num_targets,
        num_bias,
        feature_len,
        provenance: provenance.to_string(),
        seed,
    })
}
