use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sdebias_cli::commands::{
    cmd_dump_embeddings, cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, data_dir, SweepKind,
};
use sdebias_cli::reproduce::{checks_text, reproduce};
use sdebias_cli::ExperimentConfig;
use sdebias_core::TrainMode;

#[derive(Parser)]
#[command(name = "sdebias", version, about = "Shortcut debiasing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (`section.key=value` lines); built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training mode: vanilla, naive_sd, active_sd or adversarial.
    #[arg(long)]
    mode: Option<String>,
    /// Number of independent runs.
    #[arg(long)]
    repeat: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &self.mode {
            cfg.train.mode = TrainMode::parse(m)?;
        }
        if let Some(r) = self.repeat {
            cfg.repeat = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, validation and test datasets plus a manifest.
    Generate(Common),
    /// Train `repeat` models on generated data.
    Train(Common),
    /// Evaluate trained checkpoints on the test sets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// A single checkpoint; defaults to every run of the mode.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep the bias ratio or the shortcut width.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// rho or shortcut_dim.
        #[arg(long)]
        kind: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Run the full report and check the expected trends.
    Reproduce(Common),
    /// Write encoder embeddings of the fair test set.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run() -> Result<bool> {
    match Cli::parse().command {
        Command::Generate(c) => {
            let cfg = c.resolve()?;
            let bundle = cmd_generate(&cfg)?;
            for (name, d) in bundle.parts() {
                println!("{name:12} n={:6} cells={:?}", d.len(), d.cell_counts());
            }
            println!("wrote {}", data_dir(&cfg).display());
        }
        Command::Train(c) => {
            let out = cmd_train(&c.resolve()?)?;
            print!("{}", out.summary);
            println!("wrote {}", out.summary_path.display());
        }
        Command::Evaluate { common, checkpoint } => {
            for (path, report) in cmd_evaluate(&common.resolve()?, checkpoint.as_deref())? {
                println!("{}\n{}", path.display(), report.text_block());
            }
        }
        Command::Sweep { common, kind, grid } => {
            let out = cmd_sweep(&common.resolve()?, SweepKind::parse(&kind)?, &grid)?;
            print!("{}", out.table);
            println!("wrote {}", out.table_path.display());
        }
        Command::Reproduce(c) => {
            let cfg = c.resolve()?;
            let rep = reproduce(&cfg)?;
            let summary = cfg.out.join("summary");
            print!(
                "{}",
                std::fs::read_to_string(summary.join("table.csv")).context("reading summary")?
            );
            print!("{}", checks_text(&rep.checks));
            println!("wrote {} in {:.0}s", summary.display(), rep.seconds);
            return Ok(rep.passed());
        }
        Command::DumpEmbeddings { common, checkpoint } => {
            for p in cmd_dump_embeddings(&common.resolve()?, checkpoint.as_deref())? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
