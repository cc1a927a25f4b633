//! Training regimes: vanilla cross-entropy, naive shortcut debiasing
//! (frozen preset shortcuts), active shortcut debiasing (trainable
//! shortcuts plus the shortcut-effect enhancement objective), and an
//! adversarial baseline built on gradient reversal.

mod adam;
mod log;

pub use adam::Adam;
pub use log::{EpochRecord, TrainLog};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::Dataset;
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{stack_rows, FairModel, ShortcutBank, ShortcutMode};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainMode {
    Vanilla,
    NaiveSd,
    ActiveSd,
    Adversarial,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        Self::Vanilla,
        Self::NaiveSd,
        Self::ActiveSd,
        Self::Adversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::NaiveSd => "naive_sd",
            Self::ActiveSd => "active_sd",
            Self::Adversarial => "adversarial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown training mode {s:?}")))
    }

    pub fn shortcut_mode(self) -> ShortcutMode {
        match self {
            Self::Vanilla | Self::Adversarial => ShortcutMode::Disabled,
            Self::NaiveSd => ShortcutMode::Preset,
            Self::ActiveSd => ShortcutMode::Trainable,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Gradient reversal strength (adversarial mode).
    pub adv_lambda: f64,
    /// Enhancement steps per target step (active mode).
    pub enhancement_ratio: usize,
    /// Draw a fresh minibatch for enhancement instead of reusing the
    /// target step's batch.
    pub fresh_enhancement_batch: bool,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, epochs: usize, seed: u64) -> Self {
        Self {
            mode,
            lr: 1e-3,
            batch_size: 128,
            epochs,
            seed,
            adv_lambda: 1.0,
            enhancement_ratio: 1,
            fresh_enhancement_batch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lr must be >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.adv_lambda.is_nan() || self.adv_lambda < 0.0 {
            return Err(Error::InvalidConfig("adv_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Held-out sets scored after every epoch.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub biased: &'a Dataset,
    pub fair: &'a Dataset,
}

/// Minibatch with features stacked row-wise.
pub struct Batch {
    pub x: Tensor,
    pub targets: Vec<usize>,
    pub biases: Vec<usize>,
}

impl Batch {
    pub fn from_indices(d: &Dataset, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x: stack_rows(
                idx.iter().map(|&i| d.examples[i].features.as_slice()),
                d.feature_len,
            )?,
            targets: idx.iter().map(|&i| d.examples[i].target).collect(),
            biases: idx.iter().map(|&i| d.examples[i].bias).collect(),
        })
    }

    pub fn all(d: &Dataset) -> Result<Self> {
        Self::from_indices(d, &(0..d.len()).collect::<Vec<_>>())
    }
}

fn diverged(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("{what} = {v}")))
    }
}

/// One target-task step on `h([f(x), p_b])` (or `h(f(x))` without a bank),
/// updating encoder and head. The bank enters as a constant. In
/// adversarial mode the bias head is trained on the reversed
/// representation and its loss is added. Returns the target loss.
pub fn target_step(
    model: &mut FairModel,
    bank: Option<&ShortcutBank>,
    batch: &Batch,
    opt: &mut Adam,
    adv_lambda: Option<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let v = model.bind(&mut g, true, true);
    let x = g.constant(batch.x.clone());
    let z = model.encode(&mut g, &v, x)?;
    let features = match bank {
        Some(bank) => {
            let table = g.constant(bank.vectors.clone());
            let p = g.gather_rows(table, &batch.biases)?;
            g.concat(z, p)?
        }
        None => z,
    };
    let logits = model.head(&mut g, &v, features)?;
    let target_loss = g.cross_entropy(logits, &batch.targets)?;

    let root = match (adv_lambda, v.bias_head) {
        (Some(lambda), Some((w, b))) => {
            let reversed = g.grad_reverse(z, lambda)?;
            let bl = g.matmul(reversed, w)?;
            let bl = g.add_row(bl, b)?;
            let bias_loss = g.cross_entropy(bl, &batch.biases)?;
            g.add(target_loss, bias_loss)?
        }
        (Some(_), None) => {
            return Err(Error::InvalidConfig(
                "adversarial step needs a bias head".into(),
            ))
        }
        _ => target_loss,
    };
    let loss = diverged("target loss", g.value(target_loss).item())?;
    g.backward(root)?;

    let mut handles = vec![v.enc_w1, v.enc_b1, v.enc_w2, v.enc_b2, v.head_w, v.head_b];
    let adversarial = adv_lambda.is_some();
    if let (true, Some((w, b))) = (adversarial, v.bias_head) {
        handles.extend([w, b]);
    }
    let grads: Vec<Tensor> = handles
        .iter()
        .map(|&h| g.take_grad(h).expect("trainable parameter has a gradient"))
        .collect();
    let FairModel {
        enc_w1,
        enc_b1,
        enc_w2,
        enc_b2,
        head_w,
        head_b,
        bias_head,
        ..
    } = model;
    let mut params: Vec<&mut Tensor> = vec![enc_w1, enc_b1, enc_w2, enc_b2, head_w, head_b];
    if let (true, Some((w, b))) = (adversarial, bias_head) {
        params.extend([w, b]);
    }
    opt.step(&mut params, &grads);
    Ok(loss)
}

/// Shortcut importance `alpha[i][c] = Y_c(x_i, p_{b_i}) - Y_c(x_i, anchor)`
/// built on `g`. Returns the handles of `alpha` and the bank table.
fn importance(
    g: &mut Graph,
    model: &FairModel,
    bank: &ShortcutBank,
    batch: &Batch,
    train: bool,
) -> Result<(
    crate::diffcore::Var,
    crate::diffcore::Var,
    crate::model::ModelVars,
)> {
    let v = model.bind(g, false, train);
    let x = g.constant(batch.x.clone());
    let z = model.encode(g, &v, x)?;
    let table = g.leaf(bank.vectors.clone(), train);
    let p = g.gather_rows(table, &batch.biases)?;
    let rows = batch.targets.len();
    let anchor = g.constant(Tensor::matrix(
        rows,
        bank.dim(),
        bank.anchor.data().repeat(rows),
    )?);
    let with_p = g.concat(z, p)?;
    let with_anchor = g.concat(z, anchor)?;
    let yp = model.head(g, &v, with_p)?;
    let ya = model.head(g, &v, with_anchor)?;
    Ok((g.sub(yp, ya)?, table, v))
}

/// Shortcut-importance matrix for a batch, `n x |T|`.
pub fn shortcut_importance(
    model: &FairModel,
    bank: &ShortcutBank,
    batch: &Batch,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (alpha, _, _) = importance(&mut g, model, bank, batch, false)?;
    Ok(g.value(alpha).clone())
}

/// One enhancement step: maximize `softmax(alpha)[t]`, i.e. minimize the
/// cross-entropy of `alpha` against the target, over the shortcut vectors
/// and the head. The encoder is not touched. Returns the loss.
pub fn enhancement_step(
    model: &mut FairModel,
    bank: &mut ShortcutBank,
    batch: &Batch,
    opt: &mut Adam,
) -> Result<f64> {
    if !bank.trainable {
        return Err(Error::InvalidConfig(
            "enhancement needs a trainable shortcut bank".into(),
        ));
    }
    let mut g = Graph::new();
    let (alpha, table, v) = importance(&mut g, model, bank, batch, true)?;
    if !g.value(alpha).is_finite() {
        return Err(Error::Diverged("non-finite shortcut importance".into()));
    }
    let loss = g.cross_entropy(alpha, &batch.targets)?;
    let value = diverged("enhancement objective", g.value(loss).item())?;
    g.backward(loss)?;
    let grads = [v.head_w, v.head_b, table].map(|h| g.take_grad(h).expect("trainable"));
    opt.step(
        &mut [&mut model.head_w, &mut model.head_b, &mut bank.vectors],
        &grads,
    );
    Ok(value)
}

fn check_preconditions(
    model: &FairModel,
    bank: Option<&ShortcutBank>,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let want = cfg.mode.shortcut_mode();
    if model.config.shortcut_mode != want {
        return Err(Error::InvalidConfig(format!(
            "{} training needs a model with {} shortcuts, got {}",
            cfg.mode.name(),
            want.name(),
            model.config.shortcut_mode.name()
        )));
    }
    match (cfg.mode, bank) {
        (TrainMode::Vanilla | TrainMode::Adversarial, Some(_)) => Err(Error::InvalidConfig(
            format!("{} training takes no shortcut bank", cfg.mode.name()),
        )),
        (TrainMode::NaiveSd | TrainMode::ActiveSd, None) => Err(Error::InvalidConfig(format!(
            "{} training needs a shortcut bank",
            cfg.mode.name()
        ))),
        (TrainMode::NaiveSd, Some(b)) if b.trainable => Err(Error::InvalidConfig(
            "naive shortcut debiasing needs a frozen bank".into(),
        )),
        (TrainMode::ActiveSd, Some(b)) if !b.trainable => Err(Error::InvalidConfig(
            "active shortcut debiasing needs a trainable bank".into(),
        )),
        (TrainMode::Adversarial, None) if model.bias_head.is_none() => Err(Error::InvalidConfig(
            "adversarial training needs a bias head".into(),
        )),
        _ => Ok(()),
    }
}

/// Runs `cfg.epochs` epochs of the regime named by `cfg.mode`.
pub fn train(
    model: &mut FairModel,
    mut bank: Option<&mut ShortcutBank>,
    data: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    check_preconditions(model, bank.as_deref(), cfg)?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut shuffle_rng = rng_for(cfg.seed, "shuffle");
    let mut enh_rng = rng_for(cfg.seed, "enhancement_batches");
    let mut target_opt = Adam::new(cfg.lr);
    let mut enh_opt = Adam::new(cfg.lr);
    let adv_lambda = (cfg.mode == TrainMode::Adversarial).then_some(cfg.adv_lambda);
    let enhance = cfg.mode == TrainMode::ActiveSd;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut target_sum, mut enh_sum, mut batches, mut enh_steps) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_indices(data, chunk)?;
            target_sum += target_step(model, bank.as_deref(), &batch, &mut target_opt, adv_lambda)?;
            batches += 1;
            if enhance {
                let bank = bank.as_deref_mut().expect("checked above");
                for _ in 0..cfg.enhancement_ratio {
                    enh_sum += if cfg.fresh_enhancement_batch {
                        let idx: Vec<usize> = (0..chunk.len())
                            .map(|_| enh_rng.gen_range(0..data.len()))
                            .collect();
                        enhancement_step(
                            model,
                            bank,
                            &Batch::from_indices(data, &idx)?,
                            &mut enh_opt,
                        )?
                    } else {
                        enhancement_step(model, bank, &batch, &mut enh_opt)?
                    };
                    enh_steps += 1;
                }
            }
        }
        if !model.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }

        let mut record = EpochRecord {
            epoch,
            target_loss: target_sum / batches as f64,
            enh_obj: (enh_steps > 0).then(|| enh_sum / enh_steps as f64),
            ..EpochRecord::default()
        };
        if let Some(val) = val {
            let report = evaluate(model, bank.as_deref(), val.biased, val.fair)?;
            record.bias_acc = Some(report.bias_acc);
            record.fair_acc = Some(report.fair_acc);
            record.equalodds = Some(report.equalodds);
            record.counter_p = report.counter_p;
        }
        log.records.push(record);
    }
    Ok(log)
}

pub fn train_vanilla(
    model: &mut FairModel,
    data: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    expect_mode(cfg, TrainMode::Vanilla)?;
    train(model, None, data, val, cfg)
}

pub fn train_naive_sd(
    model: &mut FairModel,
    bank: &ShortcutBank,
    data: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    expect_mode(cfg, TrainMode::NaiveSd)?;
    let mut frozen = bank.clone();
    let log = train(model, Some(&mut frozen), data, val, cfg)?;
    debug_assert_eq!(&frozen, bank);
    Ok(log)
}

pub fn train_active_sd(
    model: &mut FairModel,
    bank: &mut ShortcutBank,
    data: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    expect_mode(cfg, TrainMode::ActiveSd)?;
    train(model, Some(bank), data, val, cfg)
}

pub fn train_adversarial(
    model: &mut FairModel,
    data: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    expect_mode(cfg, TrainMode::Adversarial)?;
    train(model, None, data, val, cfg)
}

fn expect_mode(cfg: &TrainConfig, mode: TrainMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::InvalidConfig(format!(
            "config mode {} passed to {} trainer",
            cfg.mode.name(),
            mode.name()
        )));
    }
    Ok(())
}
