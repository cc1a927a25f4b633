//! Per-run and aggregate CSV tables.

use std::fmt::Write as _;

use sdebias_core::FairnessReport;

use crate::run::RunResult;

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type Metric = fn(&FairnessReport) -> Option<f64>;

pub const METRICS: [(&str, Metric); 4] = [
    ("bias_acc", |r| Some(r.bias_acc)),
    ("fair_acc", |r| Some(r.fair_acc)),
    ("equalodds", |r| Some(r.equalodds)),
    ("counter_p", |r| r.counter_p),
];

/// Mean and std of one metric over runs; `None` if any run lacks it.
pub fn metric_stats(runs: &[&RunResult], metric: Metric) -> Option<(f64, f64)> {
    let values: Option<Vec<f64>> = runs.iter().map(|r| metric(&r.report)).collect();
    values.filter(|v| !v.is_empty()).map(|v| mean_std(&v))
}

pub fn metric_mean(runs: &[&RunResult], name: &str) -> Option<f64> {
    let (_, metric) = METRICS.iter().find(|(n, _)| *n == name)?;
    metric_stats(runs, *metric).map(|(m, _)| m)
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub struct Group<'a> {
    pub keys: Vec<String>,
    pub runs: Vec<&'a RunResult>,
}

fn comments(lines: &[String]) -> String {
    lines.iter().map(|l| format!("# {l}\n")).collect()
}

/// One row per run followed by `mean` and `std` rows for every group.
pub fn runs_table(header: &[String], key_names: &[&str], groups: &[Group<'_>]) -> String {
    let mut s = comments(header);
    let names: Vec<&str> = METRICS.iter().map(|(n, _)| *n).collect();
    writeln!(s, "{},run,seed,{}", key_names.join(","), names.join(",")).unwrap();
    for g in groups {
        let keys = g.keys.join(",");
        for r in &g.runs {
            let values: Vec<String> = METRICS.iter().map(|(_, m)| cell(m(&r.report))).collect();
            writeln!(s, "{keys},{},{},{}", r.repeat, r.seed, values.join(",")).unwrap();
        }
        let stats: Vec<Option<(f64, f64)>> = METRICS
            .iter()
            .map(|(_, m)| metric_stats(&g.runs, *m))
            .collect();
        let means: Vec<String> = stats.iter().map(|s| cell(s.map(|x| x.0))).collect();
        let stds: Vec<String> = stats.iter().map(|s| cell(s.map(|x| x.1))).collect();
        writeln!(s, "{keys},mean,,{}", means.join(",")).unwrap();
        writeln!(s, "{keys},std,,{}", stds.join(",")).unwrap();
    }
    s
}

/// One row per group with `<metric>_mean` and `<metric>_std` columns.
pub fn aggregate_table(header: &[String], key_names: &[&str], groups: &[Group<'_>]) -> String {
    let mut s = comments(header);
    let cols: Vec<String> = METRICS
        .iter()
        .flat_map(|(n, _)| [format!("{n}_mean"), format!("{n}_std")])
        .collect();
    writeln!(s, "{},runs,{}", key_names.join(","), cols.join(",")).unwrap();
    for g in groups {
        let values: Vec<String> = METRICS
            .iter()
            .flat_map(|(_, m)| {
                let st = metric_stats(&g.runs, *m);
                [cell(st.map(|x| x.0)), cell(st.map(|x| x.1))]
            })
            .collect();
        writeln!(
            s,
            "{},{},{}",
            g.keys.join(","),
            g.runs.len(),
            values.join(",")
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
