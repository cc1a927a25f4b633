//! The full desk-scale report: four-way comparison, shortcut-effect
//! ablation, bias-ratio sweep, shortcut-width sweep and a 10-way run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::Result;

use sdebias_core::TrainMode;

use crate::commands::{sweep_experiments, sweep_table, SweepKind};
use crate::config::ExperimentConfig;
use crate::plan::{execute, Experiment};
use crate::run::RunResult;
use crate::summary::{aggregate_table, metric_mean, runs_table, Group};

pub const RHO_GRID: [f64; 4] = [0.5, 0.7, 0.9, 0.99];
pub const DIM_GRID: [f64; 4] = [10.0, 50.0, 100.0, 200.0];
pub const MULTICLASS: usize = 10;

/// Names of the summary tables, all written to `<out>/summary/`.
pub const TABLES: [&str; 6] = [
    "table.csv",
    "ablation.csv",
    "rho_sweep.csv",
    "dim_sweep.csv",
    "multiclass.csv",
    "checks.txt",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub struct Reproduction {
    pub main: Vec<(TrainMode, Vec<RunResult>)>,
    pub rho_sweep: Vec<(f64, TrainMode, Vec<RunResult>)>,
    pub dim_sweep: Vec<(usize, Vec<RunResult>)>,
    pub multiclass: Vec<(TrainMode, Vec<RunResult>)>,
    pub checks: Vec<Check>,
    /// Wall-clock seconds for the whole reproduction.
    pub seconds: f64,
}

impl Reproduction {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn main_runs(&self, mode: TrainMode) -> &[RunResult] {
        &self
            .main
            .iter()
            .find(|(m, _)| *m == mode)
            .expect("all modes run")
            .1
    }
}

fn with_mode(cfg: &ExperimentConfig, mode: TrainMode) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.mode = mode;
    c
}

pub fn multiclass_config(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    c.dataset.num_targets = MULTICLASS;
    c.dataset.num_bias = MULTICLASS;
    c.dataset.per_cell = 40;
    c.dataset.val_per_cell = 10;
    c
}

fn mean(runs: &[RunResult], metric: &str) -> f64 {
    let refs: Vec<&RunResult> = runs.iter().collect();
    metric_mean(&refs, metric).unwrap_or(f64::NAN)
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

/// Directional checks on the reproduced numbers.
pub fn checks(r: &Reproduction) -> Vec<Check> {
    let m = |mode, metric| mean(r.main_runs(mode), metric);
    let (v_eo, n_eo, a_eo, adv_eo) = (
        m(TrainMode::Vanilla, "equalodds"),
        m(TrainMode::NaiveSd, "equalodds"),
        m(TrainMode::ActiveSd, "equalodds"),
        m(TrainMode::Adversarial, "equalodds"),
    );
    let (v_fair, a_fair) = (
        m(TrainMode::Vanilla, "fair_acc"),
        m(TrainMode::ActiveSd, "fair_acc"),
    );
    let mut out = vec![
        check("vanilla is biased", v_eo >= 0.15, format!("vanilla equalodds {v_eo:.4} (need >= 0.15)")),
        check(
            "active sd halves equalodds",
            a_eo <= 0.5 * v_eo && a_fair >= v_fair - 0.02,
            format!("active {a_eo:.4} vs vanilla {v_eo:.4}; fair acc active {a_fair:.4} vs vanilla {v_fair:.4}"),
        ),
    ];

    let naive = r.main_runs(TrainMode::NaiveSd);
    let active = r.main_runs(TrainMode::ActiveSd);
    let per_seed: Vec<(f64, f64)> = naive
        .iter()
        .zip(active)
        .map(|(n, a)| {
            (
                n.report.counter_p.unwrap_or(f64::NAN),
                a.report.counter_p.unwrap_or(f64::NAN),
            )
        })
        .collect();
    let every_seed = per_seed.iter().all(|(n, a)| a > n);
    let pairs: Vec<String> = per_seed
        .iter()
        .map(|(n, a)| format!("{a:.4}>{n:.4}"))
        .collect();
    out.push(check(
        "enhancement raises shortcut effect",
        every_seed && a_eo < n_eo,
        format!(
            "counter_p active>naive per seed [{}]; equalodds active {a_eo:.4} vs naive {n_eo:.4}",
            pairs.join(" ")
        ),
    ));
    out.push(check(
        "active sd beats adversarial",
        a_eo <= adv_eo,
        format!("equalodds active {a_eo:.4} vs adversarial {adv_eo:.4}"),
    ));

    let at = |rho: f64, mode: TrainMode, metric: &str| {
        r.rho_sweep
            .iter()
            .find(|(x, m, _)| *x == rho && *m == mode)
            .map_or(f64::NAN, |(_, _, runs)| mean(runs, metric))
    };
    let rhos: Vec<f64> = RHO_GRID.to_vec();
    let fair_ok: Vec<bool> = rhos
        .iter()
        .filter(|&&rho| rho >= 0.9)
        .map(|&rho| {
            at(rho, TrainMode::ActiveSd, "fair_acc") >= at(rho, TrainMode::Vanilla, "fair_acc")
        })
        .collect();
    let gaps: Vec<f64> = rhos
        .iter()
        .map(|&rho| {
            at(rho, TrainMode::Vanilla, "equalodds") - at(rho, TrainMode::ActiveSd, "equalodds")
        })
        .collect();
    let inversions = gaps.windows(2).filter(|w| w[1] < w[0]).count();
    let gap_text: Vec<String> = rhos
        .iter()
        .zip(&gaps)
        .map(|(r, g)| format!("{r}:{g:.4}"))
        .collect();
    out.push(check(
        "gap grows with bias ratio",
        fair_ok.iter().all(|&b| b) && inversions <= 1,
        format!(
            "vanilla-active equalodds gap [{}], {inversions} inversion(s); active fair acc >= vanilla at rho>=0.9: {fair_ok:?}",
            gap_text.join(" ")
        ),
    ));
    let sweep_ok: Vec<bool> = rhos
        .iter()
        .filter(|&&rho| rho >= 0.7)
        .map(|&rho| {
            at(rho, TrainMode::ActiveSd, "equalodds") <= at(rho, TrainMode::Vanilla, "equalodds")
        })
        .collect();
    out.push(check(
        "active sd no worse than vanilla at rho >= 0.7",
        sweep_ok.iter().all(|&b| b),
        format!("{sweep_ok:?}"),
    ));

    let dims: Vec<f64> = r
        .dim_sweep
        .iter()
        .map(|(_, runs)| mean(runs, "equalodds"))
        .collect();
    let spread = dims.iter().cloned().fold(f64::MIN, f64::max)
        - dims.iter().cloned().fold(f64::MAX, f64::min);
    let dim_text: Vec<String> = r
        .dim_sweep
        .iter()
        .zip(&dims)
        .map(|((d, _), e)| format!("{d}:{e:.4}"))
        .collect();
    out.push(check(
        "shortcut width barely matters",
        spread <= 0.05,
        format!(
            "active equalodds by width [{}], spread {spread:.4} (need <= 0.05)",
            dim_text.join(" ")
        ),
    ));

    let mc = |mode| {
        r.multiclass
            .iter()
            .find(|(m, _)| *m == mode)
            .map_or(f64::NAN, |(_, runs)| mean(runs, "equalodds"))
    };
    let (mv, ma) = (mc(TrainMode::Vanilla), mc(TrainMode::ActiveSd));
    out.push(check(
        "multiclass debiasing",
        ma < mv,
        format!("{MULTICLASS}-way equalodds active {ma:.4} vs vanilla {mv:.4}"),
    ));
    out
}

pub fn checks_text(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        writeln!(
            s,
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        )
        .unwrap();
    }
    s
}

/// Runs everything under `base.out` and writes the summary tables.
/// `base.train.mode` is ignored; every experiment sets its own.
pub fn reproduce(base: &ExperimentConfig) -> Result<Reproduction> {
    let start = Instant::now();
    let out = base.out.clone();
    let main: Vec<Experiment> = TrainMode::ALL
        .iter()
        .map(|&mode| Experiment {
            dir: out.join("main"),
            config: with_mode(base, mode),
        })
        .collect();
    let rho_points = sweep_experiments(base, SweepKind::Rho, &RHO_GRID)?;
    let dim_points = sweep_experiments(base, SweepKind::ShortcutDim, &DIM_GRID)?;
    let mc_base = multiclass_config(base);
    let multiclass: Vec<Experiment> = [TrainMode::Vanilla, TrainMode::ActiveSd]
        .iter()
        .map(|&mode| Experiment {
            dir: out.join("multiclass"),
            config: with_mode(&mc_base, mode),
        })
        .collect();

    let mut all = main.clone();
    for (_, exps) in rho_points.iter().chain(&dim_points) {
        all.extend(exps.iter().cloned());
    }
    all.extend(multiclass.iter().cloned());
    let outcomes = execute(&all, true)?;

    let mut rep = Reproduction {
        main: main
            .iter()
            .map(|e| (e.config.train.mode, outcomes.cloned(&e.config)))
            .collect(),
        rho_sweep: rho_points
            .iter()
            .flat_map(|(_, exps)| exps.iter())
            .map(|e| {
                (
                    e.config.dataset.rho,
                    e.config.train.mode,
                    outcomes.cloned(&e.config),
                )
            })
            .collect(),
        dim_sweep: dim_points
            .iter()
            .flat_map(|(_, exps)| exps.iter())
            .map(|e| (e.config.shortcut_dim(), outcomes.cloned(&e.config)))
            .collect(),
        multiclass: multiclass
            .iter()
            .map(|e| (e.config.train.mode, outcomes.cloned(&e.config)))
            .collect(),
        checks: Vec::new(),
        seconds: 0.0,
    };
    rep.checks = checks(&rep);

    let header = base.provenance_lines();
    let groups = |exps: &[Experiment]| -> Vec<Group<'_>> {
        exps.iter()
            .map(|e| Group {
                keys: vec![e.config.train.mode.name().to_string()],
                runs: outcomes.runs(&e.config),
            })
            .collect()
    };
    let ablation: Vec<Experiment> = main
        .iter()
        .filter(|e| {
            matches!(
                e.config.train.mode,
                TrainMode::NaiveSd | TrainMode::ActiveSd
            )
        })
        .cloned()
        .collect();
    let mut mc_header = mc_base.provenance_lines();
    mc_header.push(format!("num_targets=num_bias={MULTICLASS}"));
    let tables = [
        aggregate_table(&header, &["mode"], &groups(&main)),
        runs_table(&header, &["mode"], &groups(&ablation)),
        sweep_table(&header, SweepKind::Rho, &rho_points, &outcomes),
        sweep_table(&header, SweepKind::ShortcutDim, &dim_points, &outcomes),
        runs_table(&mc_header, &["mode"], &groups(&multiclass)),
        checks_text(&rep.checks),
    ];
    let dir = out.join("summary");
    fs::create_dir_all(&dir)?;
    for (name, text) in TABLES.iter().zip(&tables) {
        fs::write(dir.join(name), text)?;
    }

    let mut timings = String::from("experiment,mode,run,seconds\n");
    for (exp_dir, run) in outcomes.executed() {
        let name = exp_dir.strip_prefix(&out).unwrap_or(exp_dir).display();
        writeln!(
            timings,
            "{name},{},{},{:.2}",
            run.mode.name(),
            run.repeat,
            run.seconds
        )
        .unwrap();
    }
    rep.seconds = start.elapsed().as_secs_f64();
    writeln!(timings, "total,,,{:.2}", rep.seconds).unwrap();
    fs::write(out.join("timings.csv"), timings)?;
    Ok(rep)
}

/// Reads the summary tables written by [`reproduce`].
pub fn read_tables(out: &Path) -> Result<Vec<(String, String)>> {
    TABLES
        .iter()
        .map(|name| {
            Ok((
                name.to_string(),
                fs::read_to_string(out.join("summary").join(name))?,
            ))
        })
        .collect()
}
