//! The five datasets behind every experiment and their on-disk layout.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use sdebias_core::data::{
    fair_resample, inject_color_bias, load_idx, make_synthetic, read_records, split, write_records,
};
use sdebias_core::rng::derive_seed;
use sdebias_core::Dataset;

use crate::config::{DataSource, ExperimentConfig};

pub const PARTS: [&str; 5] = ["train", "val", "val_fair", "test_biased", "test_fair"];

/// Training set, biased and fair validation sets, biased and fair test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub train: Dataset,
    pub val: Dataset,
    pub val_fair: Dataset,
    pub test_biased: Dataset,
    pub test_fair: Dataset,
}

impl Bundle {
    pub fn parts(&self) -> [(&'static str, &Dataset); 5] {
        [
            (PARTS[0], &self.train),
            (PARTS[1], &self.val),
            (PARTS[2], &self.val_fair),
            (PARTS[3], &self.test_biased),
            (PARTS[4], &self.test_fair),
        ]
    }

    pub fn feature_len(&self) -> usize {
        self.train.feature_len
    }
}

pub fn part_seed(cfg: &ExperimentConfig, part: &str) -> u64 {
    derive_seed(cfg.seed, &format!("data/{part}"))
}

/// Size of the unbiased pool a fair set is drawn from: twice the cells'
/// worth, so every cell has room to spare.
fn pool_size(cfg: &ExperimentConfig, per_cell: usize) -> usize {
    2 * per_cell * cfg.dataset.num_targets * cfg.dataset.num_bias
}

pub fn build(cfg: &ExperimentConfig) -> Result<Bundle> {
    let d = &cfg.dataset;
    let (biased, unbiased) = (d.spec(), d.unbiased_spec());
    let seed = |p: &str| part_seed(cfg, p);
    let bundle = match &d.source {
        DataSource::Synthetic => Bundle {
            train: make_synthetic(&biased, d.n_train, seed("train"))?,
            val: make_synthetic(&biased, d.n_val, seed("val"))?,
            val_fair: fair_resample(
                &make_synthetic(
                    &unbiased,
                    pool_size(cfg, d.val_per_cell),
                    seed("val_fair_pool"),
                )?,
                d.val_per_cell,
                seed("val_fair"),
            )?,
            test_biased: make_synthetic(&biased, d.n_test, seed("test_biased"))?,
            test_fair: fair_resample(
                &make_synthetic(
                    &unbiased,
                    pool_size(cfg, d.per_cell),
                    seed("test_fair_pool"),
                )?,
                d.per_cell,
                seed("test_fair"),
            )?,
        },
        DataSource::Idx { images, labels } => {
            let base = load_idx(images, labels)?;
            if base.num_targets > d.num_targets {
                bail!(
                    "{} holds labels up to {} but dataset.num_targets={}",
                    labels.display(),
                    base.num_targets - 1,
                    d.num_targets
                );
            }
            let base = Dataset {
                num_targets: d.num_targets,
                ..base
            };
            let n = base.len() as f64;
            let biased_n = (d.n_train + d.n_val + d.n_test) as f64;
            if biased_n >= n {
                bail!("IDX file has {} images; n_train + n_val + n_test must leave room for the fair pools", base.len());
            }
            let rest = (n - biased_n) / 2.0;
            let fractions = [
                d.n_train as f64,
                d.n_val as f64,
                d.n_test as f64,
                rest,
                rest,
            ]
            .map(|v| v / n);
            let parts = split(&base, &fractions, seed("idx_split"))?;
            let inject =
                |k: usize, spec, name: &str| inject_color_bias(&parts[k], spec, seed(name));
            Bundle {
                train: inject(0, &biased, "train")?,
                val: inject(1, &biased, "val")?,
                test_biased: inject(2, &biased, "test_biased")?,
                val_fair: fair_resample(
                    &inject(3, &unbiased, "val_fair_pool")?,
                    d.val_per_cell,
                    seed("val_fair"),
                )?,
                test_fair: fair_resample(
                    &inject(4, &unbiased, "test_fair_pool")?,
                    d.per_cell,
                    seed("test_fair"),
                )?,
            }
        }
    };
    Ok(bundle)
}

fn comment_lines(out: &mut impl Write, lines: &[String]) -> Result<()> {
    for l in lines {
        writeln!(out, "# {l}")?;
    }
    Ok(())
}

/// Writes `<part>.csv` for every dataset plus `manifest.txt`.
pub fn write_bundle(cfg: &ExperimentConfig, bundle: &Bundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let header = cfg.provenance_lines();
    for (name, d) in bundle.parts() {
        let path = dir.join(format!("{name}.csv"));
        let mut out = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        comment_lines(&mut out, &header)?;
        write_records(d, &mut out)?;
        out.flush()?;
    }
    let mut m = BufWriter::new(File::create(dir.join("manifest.txt"))?);
    comment_lines(&mut m, &header)?;
    writeln!(m, "config_hash={}", cfg.hash())?;
    writeln!(m, "data_hash={}", cfg.data_hash())?;
    writeln!(m, "seed={}", cfg.seed)?;
    writeln!(m, "rho={}", cfg.dataset.rho)?;
    writeln!(m, "num_targets={}", cfg.dataset.num_targets)?;
    writeln!(m, "num_bias={}", cfg.dataset.num_bias)?;
    for (name, d) in bundle.parts() {
        writeln!(m, "{name}.file={name}.csv")?;
        writeln!(m, "{name}.seed={}", d.seed)?;
        writeln!(m, "{name}.n={}", d.len())?;
        writeln!(m, "{name}.aligned_fraction={:.6}", d.aligned_fraction())?;
        writeln!(m, "{name}.cells={:?}", d.cell_counts())?;
        writeln!(m, "{name}.provenance={}", d.provenance)?;
    }
    m.flush()?;
    Ok(())
}

/// Value of `key` in a `key=value` manifest.
pub fn manifest_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.to_string())
}

/// Loads a bundle written by [`write_bundle`] for the same dataset settings.
pub fn read_bundle(cfg: &ExperimentConfig, dir: &Path) -> Result<Bundle> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path)
        .with_context(|| format!("missing {}; run `generate` first", manifest_path.display()))?;
    let found = manifest_value(&manifest, "data_hash").unwrap_or_default();
    if found != cfg.data_hash() {
        bail!(
            "datasets in {} were generated from different dataset settings (data_hash {found}, config expects {}); rerun `generate`",
            dir.display(),
            cfg.data_hash()
        );
    }
    let read = |name: &str| -> Result<Dataset> {
        let path = dir.join(format!("{name}.csv"));
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let seed = manifest_value(&manifest, &format!("{name}.seed"))
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        read_records(BufReader::new(file), &path.display().to_string(), seed)
            .with_context(|| format!("reading {}", path.display()))
    };
    Ok(Bundle {
        train: read("train")?,
        val: read("val")?,
        val_fair: read("val_fair")?,
        test_biased: read("test_biased")?,
        test_fair: read("test_fair")?,
    })
}
