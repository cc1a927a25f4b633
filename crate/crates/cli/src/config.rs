//! Flat `section.key=value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use sdebias_core::{BiasSpec, ModelConfig, ShortcutMode, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// An IDX image/label pair, tinted with the configured color bias.
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub num_targets: usize,
    pub num_bias: usize,
    pub rho: f64,
    pub noise_std: f64,
    pub pattern_len: usize,
    pub pattern_noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Examples per `(t, b)` cell in the fair test set.
    pub per_cell: usize,
    /// Examples per `(t, b)` cell in the fair validation set.
    pub val_per_cell: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_targets: 2,
            num_bias: 2,
            rho: 0.99,
            noise_std: BiasSpec::DEFAULT_NOISE_STD,
            pattern_len: BiasSpec::DEFAULT_PATTERN_LEN,
            pattern_noise: BiasSpec::DEFAULT_PATTERN_NOISE,
            n_train: 20_000,
            n_val: 2_000,
            n_test: 2_000,
            per_cell: 500,
            val_per_cell: 100,
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> BiasSpec {
        BiasSpec {
            noise_std: self.noise_std,
            pattern_len: self.pattern_len,
            pattern_noise: self.pattern_noise,
            ..BiasSpec::new(self.num_targets, self.num_bias, self.rho)
        }
    }

    /// Same generator with the bias attribute independent of the target.
    pub fn unbiased_spec(&self) -> BiasSpec {
        BiasSpec {
            rho: 1.0 / self.num_bias as f64,
            ..self.spec()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBlock {
    pub hidden: usize,
    pub repr_dim: usize,
    /// `None` picks the mode's default (100 with shortcuts, 0 without).
    pub shortcut_dim: Option<usize>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            hidden: ModelConfig::DEFAULT_HIDDEN,
            repr_dim: ModelConfig::DEFAULT_REPR_DIM,
            shortcut_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBlock {
    pub mode: TrainMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adv_lambda: f64,
    pub enhancement_ratio: usize,
    pub fresh_enhancement_batch: bool,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let base = TrainConfig::new(TrainMode::ActiveSd, 10, 0);
        Self {
            mode: base.mode,
            lr: base.lr,
            batch_size: base.batch_size,
            epochs: base.epochs,
            adv_lambda: base.adv_lambda,
            enhancement_ratio: base.enhancement_ratio,
            fresh_enhancement_batch: base.fresh_enhancement_batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub seed: u64,
    pub repeat: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelBlock::default(),
            train: TrainBlock::default(),
            seed: 0,
            repeat: 3,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let (mut images, mut labels) = (None, None);
        let mut source = "synthetic".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got {raw:?}", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let d = &mut c.dataset;
            match key {
                "seed" => c.seed = parse_value(key, value)?,
                "repeat" => c.repeat = parse_value(key, value)?,
                "out" => c.out = PathBuf::from(value),
                "dataset.source" => source = value.to_string(),
                "dataset.idx_images" => images = Some(PathBuf::from(value)),
                "dataset.idx_labels" => labels = Some(PathBuf::from(value)),
                "dataset.num_targets" => d.num_targets = parse_value(key, value)?,
                "dataset.num_bias" => d.num_bias = parse_value(key, value)?,
                "dataset.rho" => d.rho = parse_value(key, value)?,
                "dataset.noise_std" => d.noise_std = parse_value(key, value)?,
                "dataset.pattern_len" => d.pattern_len = parse_value(key, value)?,
                "dataset.pattern_noise" => d.pattern_noise = parse_value(key, value)?,
                "dataset.n_train" => d.n_train = parse_value(key, value)?,
                "dataset.n_val" => d.n_val = parse_value(key, value)?,
                "dataset.n_test" => d.n_test = parse_value(key, value)?,
                "dataset.per_cell" => d.per_cell = parse_value(key, value)?,
                "dataset.val_per_cell" => d.val_per_cell = parse_value(key, value)?,
                "model.hidden" => c.model.hidden = parse_value(key, value)?,
                "model.repr_dim" => c.model.repr_dim = parse_value(key, value)?,
                "model.shortcut_dim" => {
                    c.model.shortcut_dim = match value {
                        "auto" => None,
                        v => Some(parse_value(key, v)?),
                    }
                }
                "train.mode" => c.train.mode = TrainMode::parse(value)?,
                "train.lr" => c.train.lr = parse_value(key, value)?,
                "train.batch_size" => c.train.batch_size = parse_value(key, value)?,
                "train.epochs" => c.train.epochs = parse_value(key, value)?,
                "train.adv_lambda" => c.train.adv_lambda = parse_value(key, value)?,
                "train.enhancement_ratio" => c.train.enhancement_ratio = parse_value(key, value)?,
                "train.fresh_enhancement_batch" => {
                    c.train.fresh_enhancement_batch = parse_value(key, value)?
                }
                _ => bail!("line {}: unknown key {key:?}", i + 1),
            }
        }
        c.dataset.source = match source.as_str() {
            "synthetic" => DataSource::Synthetic,
            "idx" => DataSource::Idx {
                images: images
                    .ok_or_else(|| anyhow!("dataset.source=idx needs dataset.idx_images"))?,
                labels: labels
                    .ok_or_else(|| anyhow!("dataset.source=idx needs dataset.idx_labels"))?,
            },
            other => bail!("unknown dataset.source {other:?} (expected synthetic or idx)"),
        };
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Every key except `out`, in canonical order. With `resolved` the
    /// shortcut width is written as the effective value.
    fn body_with(&self, resolved: bool) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("write to String");
        let d = &self.dataset;
        match &d.source {
            DataSource::Synthetic => kv("dataset.source", "synthetic".into()),
            DataSource::Idx { images, labels } => {
                kv("dataset.source", "idx".into());
                kv("dataset.idx_images", images.display().to_string());
                kv("dataset.idx_labels", labels.display().to_string());
            }
        }
        kv("dataset.num_targets", d.num_targets.to_string());
        kv("dataset.num_bias", d.num_bias.to_string());
        kv("dataset.rho", d.rho.to_string());
        kv("dataset.noise_std", d.noise_std.to_string());
        kv("dataset.pattern_len", d.pattern_len.to_string());
        kv("dataset.pattern_noise", d.pattern_noise.to_string());
        kv("dataset.n_train", d.n_train.to_string());
        kv("dataset.n_val", d.n_val.to_string());
        kv("dataset.n_test", d.n_test.to_string());
        kv("dataset.per_cell", d.per_cell.to_string());
        kv("dataset.val_per_cell", d.val_per_cell.to_string());
        kv("model.hidden", self.model.hidden.to_string());
        kv("model.repr_dim", self.model.repr_dim.to_string());
        let dim = match (resolved, self.model.shortcut_dim) {
            (true, _) => self.shortcut_dim().to_string(),
            (false, None) => "auto".into(),
            (false, Some(v)) => v.to_string(),
        };
        kv("model.shortcut_dim", dim);
        let t = &self.train;
        kv("train.mode", t.mode.name().into());
        kv("train.lr", t.lr.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.adv_lambda", t.adv_lambda.to_string());
        kv("train.enhancement_ratio", t.enhancement_ratio.to_string());
        kv(
            "train.fresh_enhancement_batch",
            t.fresh_enhancement_batch.to_string(),
        );
        kv("seed", self.seed.to_string());
        kv("repeat", self.repeat.to_string());
        s
    }

    pub fn serialize(&self) -> String {
        format!("{}out={}\n", self.body_with(false), self.out.display())
    }

    /// Hash of everything that affects results (the output directory is
    /// excluded).
    pub fn hash(&self) -> String {
        short_hash(&self.body_with(true))
    }

    /// Hash of the settings that determine the generated datasets.
    pub fn data_hash(&self) -> String {
        let body = self.body_with(true);
        let data: String = body
            .lines()
            .filter(|l| l.starts_with("dataset.") || l.starts_with("seed="))
            .map(|l| format!("{l}\n"))
            .collect();
        short_hash(&data)
    }

    /// Header lines carried by every output file.
    pub fn provenance_lines(&self) -> Vec<String> {
        vec![
            format!("config_hash={}", self.hash()),
            format!("seed={}", self.seed),
        ]
    }

    pub fn shortcut_dim(&self) -> usize {
        match self.train.mode.shortcut_mode() {
            ShortcutMode::Disabled => self.model.shortcut_dim.unwrap_or(0),
            _ => self
                .model
                .shortcut_dim
                .unwrap_or(ModelConfig::DEFAULT_SHORTCUT_DIM),
        }
    }

    pub fn model_config(&self, feature_len: usize) -> ModelConfig {
        let mode = self.train.mode;
        ModelConfig {
            hidden: self.model.hidden,
            repr_dim: self.model.repr_dim,
            shortcut_dim: self.shortcut_dim(),
            adversary: mode == TrainMode::Adversarial,
            ..ModelConfig::new(
                feature_len,
                self.dataset.num_targets,
                self.dataset.num_bias,
                mode.shortcut_mode(),
            )
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            adv_lambda: t.adv_lambda,
            enhancement_ratio: t.enhancement_ratio,
            fresh_enhancement_batch: t.fresh_enhancement_batch,
            ..TrainConfig::new(t.mode, t.epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mode = self.train.mode;
        if let (ShortcutMode::Disabled, Some(dim)) = (mode.shortcut_mode(), self.model.shortcut_dim)
        {
            if dim > 0 {
                bail!(
                    "model.shortcut_dim={dim} is not allowed with train.mode={}: only naive_sd and active_sd use shortcut features",
                    mode.name()
                );
            }
        }
        if self.repeat == 0 {
            bail!("repeat must be at least 1");
        }
        let d = &self.dataset;
        if matches!(d.source, DataSource::Synthetic) {
            d.spec().validate()?;
        }
        if d.per_cell == 0 || d.val_per_cell == 0 {
            bail!("dataset.per_cell and dataset.val_per_cell must be positive");
        }
        let cells = d.num_targets * d.num_bias;
        for (name, n) in [
            ("n_train", d.n_train),
            ("n_val", d.n_val),
            ("n_test", d.n_test),
        ] {
            if n < cells {
                bail!("dataset.{name}={n} is smaller than the {cells} (target, bias) cells");
            }
        }
        self.model_config(1).validate()?;
        self.train_config(0).validate()?;
        Ok(())
    }
}

pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
