//! Subcommand implementations. Every command takes its settings from an
//! [`ExperimentConfig`] and writes under `config.out`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use sdebias_core::eval::dump_embeddings;
use sdebias_core::model::read_checkpoint;
use sdebias_core::{evaluate, FairnessReport, TrainMode};

use crate::config::ExperimentConfig;
use crate::data::{build, read_bundle, write_bundle, Bundle};
use crate::plan::{execute, Experiment};
use crate::run::{report_csv, run_dir, train_one, write_comments, write_run, RunResult};
use crate::summary::{runs_table, Group};

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("data")
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Bundle> {
    cfg.validate()?;
    let bundle = build(cfg)?;
    write_bundle(cfg, &bundle, &data_dir(cfg))?;
    fs::write(cfg.out.join("config.txt"), cfg.serialize())?;
    Ok(bundle)
}

pub struct TrainOutput {
    pub runs: Vec<RunResult>,
    pub summary_path: PathBuf,
    pub summary: String,
}

/// Trains `cfg.repeat` models on the generated datasets.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let bundle = read_bundle(cfg, &data_dir(cfg))?;
    let runs: Vec<RunResult> = (0..cfg.repeat)
        .into_par_iter()
        .map(|r| {
            let run = train_one(cfg, &bundle, r)?;
            write_run(cfg, &run, &run_dir(&cfg.out, cfg.train.mode, r))?;
            Ok(run)
        })
        .collect::<Result<_>>()?;
    let summary = runs_table(
        &cfg.provenance_lines(),
        &["mode"],
        &[Group {
            keys: vec![cfg.train.mode.name().to_string()],
            runs: runs.iter().collect(),
        }],
    );
    let summary_path = cfg
        .out
        .join("runs")
        .join(cfg.train.mode.name())
        .join("summary.csv");
    fs::write(&summary_path, &summary)?;
    Ok(TrainOutput {
        runs,
        summary_path,
        summary,
    })
}

/// Checkpoints to operate on: the given one, or every run of the
/// configured mode.
fn checkpoints(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    if let Some(p) = checkpoint {
        return Ok(vec![p.to_path_buf()]);
    }
    let found: Vec<PathBuf> = (0..cfg.repeat)
        .map(|r| run_dir(&cfg.out, cfg.train.mode, r).join("checkpoint.txt"))
        .filter(|p| p.exists())
        .collect();
    if found.is_empty() {
        bail!(
            "no checkpoints under {}; run `train` first or pass --checkpoint",
            cfg.out.join("runs").join(cfg.train.mode.name()).display()
        );
    }
    Ok(found)
}

fn load_checkpoint(path: &Path) -> Result<sdebias_core::model::Checkpoint> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_checkpoint(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Evaluates checkpoints on the test sets; writes `eval.csv` and
/// `eval.txt` beside each checkpoint.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<(PathBuf, FairnessReport)>> {
    let bundle = read_bundle(cfg, &data_dir(cfg))?;
    let mut out = Vec::new();
    for path in checkpoints(cfg, checkpoint)? {
        let ck = load_checkpoint(&path)?;
        let report = evaluate(
            &ck.model,
            ck.bank.as_ref(),
            &bundle.test_biased,
            &bundle.test_fair,
        )?;
        let meta = |k: &str| ck.meta.get(k).cloned().unwrap_or_default();
        let mode = TrainMode::parse(&meta("mode")).unwrap_or(cfg.train.mode);
        let repeat = meta("repeat").parse().unwrap_or(0);
        let seed = meta("seed").parse().unwrap_or(0);
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::write(
            dir.join("eval.csv"),
            report_csv(&cfg.provenance_lines(), mode, repeat, seed, &report),
        )?;
        fs::write(dir.join("eval.txt"), report.text_block())?;
        out.push((path, report));
    }
    Ok(out)
}

/// Writes `embeddings.csv` (fair test set) beside each checkpoint.
pub fn cmd_dump_embeddings(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let bundle = read_bundle(cfg, &data_dir(cfg))?;
    let mut written = Vec::new();
    for path in checkpoints(cfg, checkpoint)? {
        let ck = load_checkpoint(&path)?;
        let target = path
            .parent()
            .unwrap_or(Path::new("."))
            .join("embeddings.csv");
        let mut out = BufWriter::new(File::create(&target)?);
        write_comments(&mut out, &cfg.provenance_lines())?;
        dump_embeddings(&ck.model, &bundle.test_fair, &mut out)?;
        out.flush()?;
        written.push(target);
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Rho,
    ShortcutDim,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rho => "rho",
            Self::ShortcutDim => "shortcut_dim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(Self::Rho),
            "shortcut_dim" | "dim" => Ok(Self::ShortcutDim),
            _ => bail!("unknown sweep kind {s:?} (expected rho or shortcut_dim)"),
        }
    }

    /// Modes trained at every grid point.
    pub fn modes(self) -> &'static [TrainMode] {
        match self {
            Self::Rho => &[TrainMode::Vanilla, TrainMode::ActiveSd],
            Self::ShortcutDim => &[TrainMode::ActiveSd],
        }
    }
}

/// Grid point configurations, each with its modes, in grid order.
pub fn sweep_experiments(
    base: &ExperimentConfig,
    kind: SweepKind,
    grid: &[f64],
) -> Result<Vec<(String, Vec<Experiment>)>> {
    if grid.is_empty() {
        bail!("sweep grid is empty");
    }
    grid.iter()
        .map(|&v| {
            let label = format!("{v}");
            let mut point = base.clone();
            match kind {
                SweepKind::Rho => point.dataset.rho = v,
                SweepKind::ShortcutDim => {
                    if v < 1.0 || v.fract() != 0.0 {
                        bail!("shortcut_dim grid values must be positive integers, got {v}");
                    }
                    point.model.shortcut_dim = Some(v as usize);
                }
            }
            let exps = kind
                .modes()
                .iter()
                .map(|&mode| {
                    let mut config = point.clone();
                    config.train.mode = mode;
                    Experiment {
                        dir: base.out.join(format!("{}_{label}", kind.name())),
                        config,
                    }
                })
                .collect();
            Ok((label, exps))
        })
        .collect()
}

pub fn sweep_table(
    header: &[String],
    kind: SweepKind,
    points: &[(String, Vec<Experiment>)],
    outcomes: &crate::plan::Outcomes,
) -> String {
    let groups: Vec<Group<'_>> = points
        .iter()
        .flat_map(|(label, exps)| {
            exps.iter().map(move |e| Group {
                keys: vec![label.clone(), e.config.train.mode.name().to_string()],
                runs: outcomes.runs(&e.config),
            })
        })
        .collect();
    runs_table(header, &[kind.name(), "mode"], &groups)
}

pub struct SweepOutput {
    pub table_path: PathBuf,
    pub table: String,
}

pub fn cmd_sweep(base: &ExperimentConfig, kind: SweepKind, grid: &[f64]) -> Result<SweepOutput> {
    let points = sweep_experiments(base, kind, grid)?;
    let all: Vec<Experiment> = points.iter().flat_map(|(_, e)| e.iter().cloned()).collect();
    let outcomes = execute(&all, true)?;
    let mut header = base.provenance_lines();
    header.push(format!(
        "sweep={} grid={}",
        kind.name(),
        grid.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    let table = sweep_table(&header, kind, &points, &outcomes);
    fs::create_dir_all(&base.out)?;
    let table_path = base.out.join(format!("sweep_{}.csv", kind.name()));
    fs::write(&table_path, &table)?;
    Ok(SweepOutput { table_path, table })
}
