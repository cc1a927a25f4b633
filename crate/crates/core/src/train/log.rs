use std::io::Write;

use crate::error::Result;

/// Metrics for one completed epoch. Validation fields are `None` when no
/// validation sets were supplied (and `counter_p` for shortcut-free models).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub target_loss: f64,
    pub enh_obj: Option<f64>,
    pub bias_acc: Option<f64>,
    pub fair_acc: Option<f64>,
    pub equalodds: Option<f64>,
    pub counter_p: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "epoch,target_loss,enh_obj,bias_acc,fair_acc,equalodds,counter_p";

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV with optional `#` comment lines before the header.
    pub fn write_csv(&self, comments: &[String], mut out: impl Write) -> Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "{}", Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.records {
            writeln!(
                out,
                "{},{:.6},{},{},{},{},{}",
                r.epoch,
                r.target_loss,
                opt(r.enh_obj),
                opt(r.bias_acc),
                opt(r.fair_acc),
                opt(r.equalodds),
                opt(r.counter_p)
            )?;
        }
        Ok(())
    }
}
