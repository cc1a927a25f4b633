//! A single training run and its artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

use sdebias_core::model::{init, write_checkpoint, Checkpoint};
use sdebias_core::rng::derive_seed;
use sdebias_core::train::{train, Validation};
use sdebias_core::{evaluate, FairnessReport, TrainLog, TrainMode};

use crate::config::ExperimentConfig;
use crate::data::Bundle;

#[derive(Clone, Debug)]
pub struct RunResult {
    pub mode: TrainMode,
    pub repeat: usize,
    pub seed: u64,
    pub report: FairnessReport,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
    /// Wall-clock training and evaluation time.
    pub seconds: f64,
}

/// Seed of repeat `r`, used for initialization and minibatch order.
pub fn run_seed(root: u64, repeat: usize) -> u64 {
    derive_seed(root, &format!("run{repeat}"))
}

pub fn run_dir(root: &Path, mode: TrainMode, repeat: usize) -> PathBuf {
    root.join("runs")
        .join(mode.name())
        .join(format!("run{repeat}"))
}

pub fn train_one(cfg: &ExperimentConfig, bundle: &Bundle, repeat: usize) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = run_seed(cfg.seed, repeat);
    let model_cfg = cfg.model_config(bundle.feature_len());
    let (mut model, mut bank) = init(&model_cfg, seed)?;
    let train_cfg = cfg.train_config(seed);
    let val = Validation {
        biased: &bundle.val,
        fair: &bundle.val_fair,
    };
    let log = train(
        &mut model,
        bank.as_mut(),
        &bundle.train,
        Some(val),
        &train_cfg,
    )
    .with_context(|| format!("training {} run {repeat}", cfg.train.mode.name()))?;
    let report = evaluate(
        &model,
        bank.as_ref(),
        &bundle.test_biased,
        &bundle.test_fair,
    )?;
    let meta = BTreeMap::from([
        ("config_hash".to_string(), cfg.hash()),
        ("mode".to_string(), cfg.train.mode.name().to_string()),
        ("repeat".to_string(), repeat.to_string()),
        ("root_seed".to_string(), cfg.seed.to_string()),
        ("seed".to_string(), seed.to_string()),
    ]);
    Ok(RunResult {
        mode: cfg.train.mode,
        repeat,
        seed,
        report,
        log,
        checkpoint: Checkpoint { model, bank, meta },
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn write_comments(out: &mut impl Write, lines: &[String]) -> std::io::Result<()> {
    for l in lines {
        writeln!(out, "# {l}")?;
    }
    Ok(())
}

pub fn report_csv(
    header: &[String],
    mode: TrainMode,
    repeat: usize,
    seed: u64,
    report: &FairnessReport,
) -> String {
    let mut out = Vec::new();
    write_comments(&mut out, header).expect("write to Vec");
    let mut s = String::from_utf8(out).expect("utf8");
    s.push_str(&format!("mode,run,seed,{}\n", FairnessReport::CSV_HEADER));
    s.push_str(&format!(
        "{},{repeat},{seed},{}\n",
        mode.name(),
        report.csv_row()
    ));
    s
}

/// `checkpoint.txt`, `train_log.csv`, `report.csv` and `report.txt`.
pub fn write_run(cfg: &ExperimentConfig, run: &RunResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let header = cfg.provenance_lines();

    let mut ck = BufWriter::new(File::create(dir.join("checkpoint.txt"))?);
    write_checkpoint(&run.checkpoint, &mut ck)?;
    ck.flush()?;

    let mut log_header = header.clone();
    log_header.push(format!("run={} run_seed={}", run.repeat, run.seed));
    let mut log = BufWriter::new(File::create(dir.join("train_log.csv"))?);
    run.log.write_csv(&log_header, &mut log)?;
    log.flush()?;

    fs::write(
        dir.join("report.csv"),
        report_csv(&header, run.mode, run.repeat, run.seed, &run.report),
    )?;
    fs::write(
        dir.join("report.txt"),
        format!(
            "{} run {} (seed {})\n{}",
            run.mode.name(),
            run.repeat,
            run.seed,
            run.report.text_block()
        ),
    )?;
    Ok(())
}
