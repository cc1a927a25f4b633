//! The classifier: an MLP encoder `f`, an affine target head `h` over the
//! composite feature `[f(x), p]`, and the bank of per-bias shortcut vectors.
//!
//! The head is a single affine layer on purpose: logits are then linear in
//! the shortcut slot, so feeding the mean shortcut vector gives exactly the
//! mean of the per-bias logits.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use rand::Rng as _;

use crate::diffcore::{softmax_rows, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// How the shortcut slot of the head is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutMode {
    /// No shortcut slot; head width is `repr_dim`.
    Disabled,
    /// Constant preset vectors (zeros / ones), never trained.
    Preset,
    /// Randomly initialized vectors updated by the enhancement objective.
    Trainable,
}

impl ShortcutMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Disabled => "disabled",
            Self::Preset => "preset",
            Self::Trainable => "trainable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "disabled" => Ok(Self::Disabled),
            "preset" => Ok(Self::Preset),
            "trainable" => Ok(Self::Trainable),
            _ => Err(Error::InvalidConfig(format!("unknown shortcut mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_len: usize,
    pub hidden: usize,
    pub repr_dim: usize,
    pub num_targets: usize,
    pub num_bias: usize,
    pub shortcut_dim: usize,
    pub shortcut_mode: ShortcutMode,
    /// Attach an auxiliary bias head on the representation.
    pub adversary: bool,
}

impl ModelConfig {
    pub const DEFAULT_HIDDEN: usize = 256;
    pub const DEFAULT_REPR_DIM: usize = 128;
    pub const DEFAULT_SHORTCUT_DIM: usize = 100;

    pub fn new(
        feature_len: usize,
        num_targets: usize,
        num_bias: usize,
        mode: ShortcutMode,
    ) -> Self {
        Self {
            feature_len,
            hidden: Self::DEFAULT_HIDDEN,
            repr_dim: Self::DEFAULT_REPR_DIM,
            num_targets,
            num_bias,
            shortcut_dim: if mode == ShortcutMode::Disabled {
                0
            } else {
                Self::DEFAULT_SHORTCUT_DIM
            },
            shortcut_mode: mode,
            adversary: false,
        }
    }

    /// Width of the head input.
    pub fn head_in(&self) -> usize {
        self.repr_dim + self.slot_dim()
    }

    fn slot_dim(&self) -> usize {
        match self.shortcut_mode {
            ShortcutMode::Disabled => 0,
            _ => self.shortcut_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.feature_len, self.hidden, self.repr_dim];
        if dims.contains(&0) || self.num_targets < 2 || self.num_bias < 1 {
            return Err(Error::InvalidConfig(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        match self.shortcut_mode {
            ShortcutMode::Disabled if self.shortcut_dim > 0 => Err(Error::InvalidConfig(format!(
                "shortcut_dim = {} but shortcuts are disabled for this mode",
                self.shortcut_dim
            ))),
            ShortcutMode::Preset | ShortcutMode::Trainable if self.shortcut_dim == 0 => Err(
                Error::InvalidConfig("shortcut modes need shortcut_dim > 0".into()),
            ),
            ShortcutMode::Preset if self.num_bias > self.shortcut_dim => Err(Error::InvalidConfig(
                "preset shortcuts need shortcut_dim >= num_bias".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Encoder and head parameters. Weight matrices are `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FairModel {
    pub config: ModelConfig,
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w2: Tensor,
    pub enc_b2: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// Auxiliary bias classifier `repr_dim -> |B|` (adversarial training only).
    pub bias_head: Option<(Tensor, Tensor)>,
}

/// Per-bias shortcut vectors `p_b` plus the fixed counterfactual anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortcutBank {
    /// `|B| x shortcut_dim`, row `b` is `p_b`.
    pub vectors: Tensor,
    pub anchor: Tensor,
    pub trainable: bool,
}

impl ShortcutBank {
    pub fn num_bias(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, b: usize) -> &[f64] {
        self.vectors.row(b)
    }

    /// Zeros and ones for two classes. With more classes each `p_b` is the
    /// indicator of its own block of coordinates.
    pub fn preset(num_bias: usize, dim: usize) -> Self {
        let mut vectors = Tensor::zeros(&[num_bias, dim]);
        if num_bias == 2 {
            vectors.data_mut()[dim..].fill(1.0);
        } else {
            for b in 0..num_bias {
                let (lo, hi) = (b * dim / num_bias, (b + 1) * dim / num_bias);
                vectors.data_mut()[b * dim + lo..b * dim + hi].fill(1.0);
            }
        }
        Self {
            vectors,
            anchor: Tensor::zeros(&[dim]),
            trainable: false,
        }
    }
}

/// Uniform mean of the shortcut vectors (anchor excluded): the single
/// vector fed to every test sample.
pub fn intervention_feature(bank: &ShortcutBank) -> Vec<f64> {
    let n = bank.num_bias() as f64;
    let mut mean = vec![0.0; bank.dim()];
    for b in 0..bank.num_bias() {
        for (m, v) in mean.iter_mut().zip(bank.vector(b)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn uniform(rng: &mut crate::rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape matches")
}

/// `U(-s, s)` weights and biases with `s = 1 / sqrt(fan_in)`.
fn linear(rng: &mut crate::rng::Rng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let s = init_bound(fan_in);
    (
        uniform(rng, &[fan_in, fan_out], -s, s),
        uniform(rng, &[fan_out], -s, s),
    )
}

pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Deterministic initialization. Returns a bank unless shortcuts are
/// disabled.
pub fn init(config: &ModelConfig, seed: u64) -> Result<(FairModel, Option<ShortcutBank>)> {
    config.validate()?;
    let mut rng = rng_for(seed, "init");
    let (enc_w1, enc_b1) = linear(&mut rng, config.feature_len, config.hidden);
    let (enc_w2, enc_b2) = linear(&mut rng, config.hidden, config.repr_dim);
    let (head_w, head_b) = linear(&mut rng, config.head_in(), config.num_targets);
    let bias_head = config
        .adversary
        .then(|| linear(&mut rng, config.repr_dim, config.num_bias));

    let dim = config.shortcut_dim;
    let bank = match config.shortcut_mode {
        ShortcutMode::Disabled => None,
        mode => {
            let vectors = uniform(&mut rng, &[config.num_bias, dim], 0.0, 1.0);
            let anchor = uniform(&mut rng, &[dim], 0.0, 1.0);
            Some(if mode == ShortcutMode::Preset {
                ShortcutBank {
                    anchor,
                    ..ShortcutBank::preset(config.num_bias, dim)
                }
            } else {
                ShortcutBank {
                    vectors,
                    anchor,
                    trainable: true,
                }
            })
        }
    };

    let model = FairModel {
        config: config.clone(),
        enc_w1,
        enc_b1,
        enc_w2,
        enc_b2,
        head_w,
        head_b,
        bias_head,
    };
    Ok((model, bank))
}

/// Graph handles for the model parameters.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub enc_w1: Var,
    pub enc_b1: Var,
    pub enc_w2: Var,
    pub enc_b2: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub bias_head: Option<(Var, Var)>,
}

impl ModelVars {
    pub fn encoder(&self) -> [Var; 4] {
        [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2]
    }

    pub fn head(&self) -> [Var; 2] {
        [self.head_w, self.head_b]
    }
}

impl FairModel {
    /// Loads the parameters into `g`; frozen parts enter as constants.
    pub fn bind(&self, g: &mut Graph, train_encoder: bool, train_head: bool) -> ModelVars {
        ModelVars {
            enc_w1: g.leaf(self.enc_w1.clone(), train_encoder),
            enc_b1: g.leaf(self.enc_b1.clone(), train_encoder),
            enc_w2: g.leaf(self.enc_w2.clone(), train_encoder),
            enc_b2: g.leaf(self.enc_b2.clone(), train_encoder),
            head_w: g.leaf(self.head_w.clone(), train_head),
            head_b: g.leaf(self.head_b.clone(), train_head),
            bias_head: self.bias_head.as_ref().map(|(w, b)| {
                (
                    g.leaf(w.clone(), train_encoder),
                    g.leaf(b.clone(), train_encoder),
                )
            }),
        }
    }

    /// `f(x)`: two ReLU layers. `x` is `n x feature_len`.
    pub fn encode(&self, g: &mut Graph, v: &ModelVars, x: Var) -> Result<Var> {
        let h = g.matmul(x, v.enc_w1)?;
        let h = g.add_row(h, v.enc_b1)?;
        let h = g.relu(h)?;
        let z = g.matmul(h, v.enc_w2)?;
        let z = g.add_row(z, v.enc_b2)?;
        g.relu(z)
    }

    /// `h(features)`; `features` is `repr` or `[repr, shortcut]` per row.
    pub fn head(&self, g: &mut Graph, v: &ModelVars, features: Var) -> Result<Var> {
        let z = g.matmul(features, v.head_w)?;
        g.add_row(z, v.head_b)
    }

    /// Logits of `h([f(x), p])` for a batch; `shortcut` holds one row per
    /// example and must be `None` exactly when shortcuts are disabled.
    pub fn logits(
        &self,
        g: &mut Graph,
        v: &ModelVars,
        x: Var,
        shortcut: Option<Var>,
    ) -> Result<Var> {
        let z = self.encode(g, v, x)?;
        let features = match shortcut {
            Some(p) => g.concat(z, p)?,
            None => z,
        };
        self.head(g, v, features)
    }

    pub fn has_shortcuts(&self) -> bool {
        self.config.shortcut_mode != ShortcutMode::Disabled
    }

    /// Representation `f(x)` for a batch of feature rows.
    pub fn embed(&self, xs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false, false);
        let x = g.constant(xs.clone());
        let z = self.encode(&mut g, &v, x)?;
        Ok(g.value(z).clone())
    }

    /// Logits for a batch where every row uses the same shortcut vector
    /// `p` (or none when shortcuts are disabled).
    pub fn batch_logits(&self, xs: &Tensor, p: Option<&[f64]>) -> Result<Tensor> {
        if xs.cols() != self.config.feature_len {
            return Err(Error::ShapeMismatch {
                op: "batch_logits",
                lhs: xs.shape().to_vec(),
                rhs: vec![self.config.feature_len],
            });
        }
        let mut g = Graph::new();
        let v = self.bind(&mut g, false, false);
        let x = g.constant(xs.clone());
        let shortcut = match (p, self.has_shortcuts()) {
            (Some(p), true) => {
                if p.len() != self.config.shortcut_dim {
                    return Err(Error::ShapeMismatch {
                        op: "compose",
                        lhs: vec![p.len()],
                        rhs: vec![self.config.shortcut_dim],
                    });
                }
                let rows = xs.rows();
                let tiled = p.repeat(rows);
                Some(g.constant(Tensor::matrix(rows, p.len(), tiled)?))
            }
            (None, false) => None,
            (got, _) => {
                return Err(Error::ShapeMismatch {
                    op: "compose",
                    lhs: vec![got.map_or(0, <[f64]>::len)],
                    rhs: vec![self.config.head_in() - self.config.repr_dim],
                })
            }
        };
        let out = self.logits(&mut g, &v, x, shortcut)?;
        Ok(g.value(out).clone())
    }

    /// Class probabilities for a batch. With a bank the shortcut slot is
    /// filled with the intervention feature, so no bias label is needed.
    pub fn predict_proba(&self, bank: Option<&ShortcutBank>, xs: &Tensor) -> Result<Tensor> {
        let p = bank.map(intervention_feature);
        Ok(softmax_rows(&self.batch_logits(xs, p.as_deref())?))
    }

    /// All parameter tensors in checkpoint order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("enc.w1", &self.enc_w1),
            ("enc.b1", &self.enc_b1),
            ("enc.w2", &self.enc_w2),
            ("enc.b2", &self.enc_b2),
            ("head.w", &self.head_w),
            ("head.b", &self.head_b),
        ];
        if let Some((w, b)) = &self.bias_head {
            out.push(("adv.w", w));
            out.push(("adv.b", b));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }
}

/// Logits `h([f(x), p])` for one example.
pub fn compose(model: &FairModel, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    let xs = Tensor::matrix(1, x.len(), x.to_vec())?;
    let shortcut = model.has_shortcuts().then_some(p);
    Ok(model.batch_logits(&xs, shortcut)?.into_data())
}

/// `h([f(x), E_b[p_b]])` for one example.
pub fn intervened_logits(model: &FairModel, bank: &ShortcutBank, x: &[f64]) -> Result<Vec<f64>> {
    compose(model, x, &intervention_feature(bank))
}

/// `softmax(h([f(x), E_b[p_b]]))` for one example.
pub fn predict_intervened(model: &FairModel, bank: &ShortcutBank, x: &[f64]) -> Result<Vec<f64>> {
    let xs = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(model.predict_proba(Some(bank), &xs)?.into_data())
}

/// Stacks feature vectors into an `n x len` tensor.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, len: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != len {
            return Err(Error::ShapeMismatch {
                op: "stack_rows",
                lhs: vec![r.len()],
                rhs: vec![len],
            });
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::matrix(n, len, data)
}
