//! Fairness and accuracy metrics.
//!
//! Equalodds follows the binary definition
//! `(1/|T|) sum_t |Pr_b0(pred = 1 | T = t) - Pr_b1(pred = 1 | T = t)|`.
//! For binary targets that equals the mean over `t` of the gap in per-class
//! recall `Pr_b(pred = t | T = t)`, which is the form used here for any
//! number of classes: per-class recall gaps, averaged over classes and over
//! unordered pairs of bias groups. The multiclass form is an extension.

use std::fmt::Write as _;
use std::io::Write;

use crate::data::Dataset;
use crate::diffcore::{softmax_rows, Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{stack_rows, FairModel, ShortcutBank};

const CHUNK: usize = 1024;

/// Counts per `(target, bias, predicted)` cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub num_targets: usize,
    pub num_bias: usize,
    counts: Vec<usize>,
}

impl Confusion {
    pub fn new(num_targets: usize, num_bias: usize) -> Self {
        Self {
            num_targets,
            num_bias,
            counts: vec![0; num_targets * num_bias * num_targets],
        }
    }

    fn index(&self, t: usize, b: usize, pred: usize) -> usize {
        (t * self.num_bias + b) * self.num_targets + pred
    }

    pub fn from_predictions(
        preds: &[usize],
        targets: &[usize],
        biases: &[usize],
        num_targets: usize,
        num_bias: usize,
    ) -> Result<Self> {
        if preds.len() != targets.len() || preds.len() != biases.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                lhs: vec![preds.len()],
                rhs: vec![targets.len(), biases.len()],
            });
        }
        let mut c = Self::new(num_targets, num_bias);
        for ((&p, &t), &b) in preds.iter().zip(targets).zip(biases) {
            if p >= num_targets || t >= num_targets || b >= num_bias {
                return Err(Error::InvalidConfig(format!(
                    "label out of range: pred {p}, target {t}, bias {b}"
                )));
            }
            let i = c.index(t, b, p);
            c.counts[i] += 1;
        }
        Ok(c)
    }

    pub fn get(&self, t: usize, b: usize, pred: usize) -> usize {
        self.counts[self.index(t, b, pred)]
    }

    pub fn cell_total(&self, t: usize, b: usize) -> usize {
        (0..self.num_targets).map(|p| self.get(t, b, p)).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.num_targets)
            .flat_map(|t| (0..self.num_bias).map(move |b| (t, b)))
            .map(|(t, b)| self.get(t, b, t))
            .sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Empty("accuracy")),
            n => Ok(self.correct() as f64 / n as f64),
        }
    }

    /// `Pr_b(pred = t | T = t)`.
    fn recall(&self, t: usize, b: usize) -> Result<f64> {
        match self.cell_total(t, b) {
            0 => Err(Error::EmptyCell { target: t, bias: b }),
            n => Ok(self.get(t, b, t) as f64 / n as f64),
        }
    }

    pub fn equalodds(&self) -> Result<f64> {
        if self.num_bias < 2 {
            return Err(Error::InvalidConfig(
                "equalodds needs at least two bias groups".into(),
            ));
        }
        let mut recalls = vec![vec![0.0; self.num_bias]; self.num_targets];
        for (t, row) in recalls.iter_mut().enumerate() {
            for (b, r) in row.iter_mut().enumerate() {
                *r = self.recall(t, b)?;
            }
        }
        let mut total = 0.0;
        let mut terms = 0usize;
        for row in &recalls {
            for b in 0..self.num_bias {
                for b2 in b + 1..self.num_bias {
                    total += (row[b] - row[b2]).abs();
                    terms += 1;
                }
            }
        }
        Ok(total / terms as f64)
    }
}

pub fn equalodds(
    preds: &[usize],
    targets: &[usize],
    biases: &[usize],
    num_targets: usize,
    num_bias: usize,
) -> Result<f64> {
    Confusion::from_predictions(preds, targets, biases, num_targets, num_bias)?.equalodds()
}

pub fn accuracy(preds: &[usize], targets: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: vec![preds.len()],
            rhs: vec![targets.len()],
        });
    }
    let correct = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn chunks(d: &Dataset) -> impl Iterator<Item = Result<Tensor>> + '_ {
    d.examples
        .chunks(CHUNK)
        .map(|c| stack_rows(c.iter().map(|e| e.features.as_slice()), d.feature_len))
}

/// Predicted classes: intervention inference when a bank is given, plain
/// `softmax(h(f(x)))` otherwise.
pub fn predict(model: &FairModel, bank: Option<&ShortcutBank>, d: &Dataset) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(d.len());
    for xs in chunks(d) {
        let probs = model.predict_proba(bank, &xs?)?;
        preds.extend((0..probs.rows()).map(|r| argmax(probs.row(r))));
    }
    Ok(preds)
}

/// Per-example true-class probability under each shortcut vector:
/// `out[b][i] = Pr(T = t_i | x_i, p_b)`.
pub fn true_class_probs_per_shortcut(
    model: &FairModel,
    bank: &ShortcutBank,
    d: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    let nb = bank.num_bias();
    let mut out = vec![Vec::with_capacity(d.len()); nb];
    for (chunk, xs) in d.examples.chunks(CHUNK).zip(chunks(d)) {
        let z = model.embed(&xs?)?;
        let rows = z.rows();
        let mut g = Graph::new();
        let v = model.bind(&mut g, false, false);
        let zv = g.constant(z);
        for (b, column) in out.iter_mut().enumerate() {
            let p = g.constant(Tensor::matrix(
                rows,
                bank.dim(),
                bank.vector(b).repeat(rows),
            )?);
            let features = g.concat(zv, p)?;
            let logits = model.head(&mut g, &v, features)?;
            let probs = softmax_rows(g.value(logits));
            column.extend(chunk.iter().enumerate().map(|(i, e)| probs.at(i, e.target)));
        }
    }
    Ok(out)
}

/// Counter@P: mean absolute change of the true-class probability when the
/// shortcut vector is swapped, averaged over unordered pairs of bias
/// classes (a single pair for binary bias).
pub fn counter_p(model: &FairModel, bank: &ShortcutBank, testset: &Dataset) -> Result<f64> {
    if bank.num_bias() < 2 {
        return Err(Error::InvalidConfig(
            "Counter@P needs at least two shortcut vectors".into(),
        ));
    }
    if testset.is_empty() {
        return Err(Error::Empty("counter_p"));
    }
    let probs = true_class_probs_per_shortcut(model, bank, testset)?;
    let n = testset.len() as f64;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for b in 0..probs.len() {
        for b2 in b + 1..probs.len() {
            let gap: f64 = probs[b]
                .iter()
                .zip(&probs[b2])
                .map(|(x, y)| (x - y).abs())
                .sum();
            total += gap / n;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairnessReport {
    /// Measured on the fair test set.
    pub equalodds: f64,
    pub bias_acc: f64,
    pub fair_acc: f64,
    /// `None` for models without shortcut features.
    pub counter_p: Option<f64>,
    /// Fair test set confusion.
    pub per_group_confusion: Confusion,
}

impl FairnessReport {
    pub const CSV_HEADER: &'static str = "bias_acc,fair_acc,equalodds,counter_p";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{}",
            self.bias_acc,
            self.fair_acc,
            self.equalodds,
            self.counter_p.map_or(String::new(), |c| format!("{c:.6}"))
        )
    }

    pub fn text_block(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        writeln!(s, "Bias accuracy : {}%", pct(self.bias_acc)).unwrap();
        writeln!(s, "Fair accuracy : {}%", pct(self.fair_acc)).unwrap();
        writeln!(s, "Equalodds     : {}%", pct(self.equalodds)).unwrap();
        match self.counter_p {
            Some(c) => writeln!(s, "Counter@P     : {c:.4}").unwrap(),
            None => writeln!(s, "Counter@P     : -").unwrap(),
        }
        let c = &self.per_group_confusion;
        writeln!(s, "Fair-set recall by (target, bias):").unwrap();
        for t in 0..c.num_targets {
            let cells: Vec<String> = (0..c.num_bias)
                .map(|b| {
                    let n = c.cell_total(t, b);
                    format!("b{b}={}/{n}", c.get(t, b, t))
                })
                .collect();
            writeln!(s, "  t{t}: {}", cells.join(" ")).unwrap();
        }
        s
    }
}

/// One-pass evaluation. Predictions use the intervention feature whenever
/// a bank is supplied.
pub fn evaluate(
    model: &FairModel,
    bank: Option<&ShortcutBank>,
    biased_test: &Dataset,
    fair_test: &Dataset,
) -> Result<FairnessReport> {
    let biased_preds = predict(model, bank, biased_test)?;
    let fair_preds = predict(model, bank, fair_test)?;
    let confusion = Confusion::from_predictions(
        &fair_preds,
        &fair_test.targets(),
        &fair_test.biases(),
        fair_test.num_targets,
        fair_test.num_bias,
    )?;
    Ok(FairnessReport {
        equalodds: confusion.equalodds()?,
        bias_acc: accuracy(&biased_preds, &biased_test.targets())?,
        fair_acc: confusion.accuracy()?,
        counter_p: bank.map(|b| counter_p(model, b, fair_test)).transpose()?,
        per_group_confusion: confusion,
    })
}

/// Writes `t,b,e1,...,e_repr_dim` for every example.
pub fn dump_embeddings(model: &FairModel, d: &Dataset, mut out: impl Write) -> Result<()> {
    let mut line = String::new();
    for (chunk, xs) in d.examples.chunks(CHUNK).zip(chunks(d)) {
        let z = model.embed(&xs?)?;
        for (i, e) in chunk.iter().enumerate() {
            line.clear();
            write!(line, "{},{}", e.target, e.bias).unwrap();
            for v in z.row(i) {
                write!(line, ",{v:e}").unwrap();
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}
