//! Runs a set of experiments, sharing datasets and identical runs.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use anyhow::Result;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{build, Bundle};
use crate::run::{run_dir, train_one, write_run, RunResult};

/// One experiment: a configuration (training mode included) and the
/// directory its runs are written under.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
}

#[derive(Default)]
pub struct Outcomes {
    runs: HashMap<(String, usize), RunResult>,
    /// `(directory, result key)` in first-request order.
    order: Vec<(PathBuf, (String, usize))>,
}

impl Outcomes {
    /// Results of every repeat of `cfg`.
    pub fn runs(&self, cfg: &ExperimentConfig) -> Vec<&RunResult> {
        let hash = cfg.hash();
        (0..cfg.repeat)
            .map(|r| {
                self.runs
                    .get(&(hash.clone(), r))
                    .expect("experiment was executed")
            })
            .collect()
    }

    pub fn cloned(&self, cfg: &ExperimentConfig) -> Vec<RunResult> {
        self.runs(cfg).into_iter().cloned().collect()
    }

    /// `(directory, run)` for every executed run, in plan order.
    pub fn executed(&self) -> impl Iterator<Item = (&PathBuf, &RunResult)> {
        self.order.iter().map(|(dir, key)| (dir, &self.runs[key]))
    }
}

/// Builds every distinct dataset bundle, trains every distinct run in
/// parallel and, when `write` is set, stores each run's artifacts under
/// the first experiment that asked for it. Results do not depend on
/// scheduling.
pub fn execute(experiments: &[Experiment], write: bool) -> Result<Outcomes> {
    for e in experiments {
        e.config.validate()?;
    }
    let mut data_cfgs: BTreeMap<String, &ExperimentConfig> = BTreeMap::new();
    for e in experiments {
        data_cfgs.entry(e.config.data_hash()).or_insert(&e.config);
    }
    let bundles: HashMap<String, Bundle> = data_cfgs
        .into_par_iter()
        .map(|(hash, cfg)| Ok((hash, build(cfg)?)))
        .collect::<Result<_>>()?;

    let mut jobs: Vec<(&Experiment, usize)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for e in experiments {
        for r in 0..e.config.repeat {
            if seen.insert((e.config.hash(), r)) {
                jobs.push((e, r));
            }
        }
    }
    let total = jobs.len();
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|(e, r)| {
            let bundle = &bundles[&e.config.data_hash()];
            let run = train_one(&e.config, bundle, *r)?;
            if write {
                write_run(&e.config, &run, &run_dir(&e.dir, run.mode, *r))?;
            }
            eprintln!(
                "[{}] {} run {} done in {:.1}s (equalodds {:.4})",
                e.dir.display(),
                run.mode.name(),
                r,
                run.seconds,
                run.report.equalodds
            );
            Ok(run)
        })
        .collect::<Result<_>>()?;
    eprintln!("{total} runs finished");

    let mut out = Outcomes::default();
    for ((e, r), run) in jobs.iter().zip(results) {
        let key = (e.config.hash(), *r);
        out.order.push((e.dir.clone(), key.clone()));
        out.runs.insert(key, run);
    }
    Ok(out)
}
