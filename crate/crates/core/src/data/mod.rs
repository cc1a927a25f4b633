//! Biased classification datasets: synthetic color-biased generation, IDX
//! ingestion with color injection, fair resampling and stratified splits.

mod idx;
mod record;
mod synth;

pub use idx::{load_idx, write_idx};
pub use record::{read_records, write_records};
pub use synth::{
    aligned_bias, default_palette, inject_color_bias, make_synthetic, pattern_template,
};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// One labeled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Flattened image, values in `[0, 1]`. Color images are stored plane
    /// by plane (all red values, then green, then blue).
    pub features: Vec<f64>,
    pub target: usize,
    pub bias: usize,
}

/// Parameters of synthetic bias injection.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasSpec {
    pub num_targets: usize,
    pub num_bias: usize,
    /// `Pr(B = aligned(t) | T = t)`.
    pub rho: f64,
    /// One RGB tint per bias class.
    pub palette: Vec<[f64; 3]>,
    /// Std of gaussian noise added to each tinted value.
    pub noise_std: f64,
    /// Length of the grayscale pattern produced per target by
    /// [`make_synthetic`]; ignored by [`inject_color_bias`].
    pub pattern_len: usize,
    /// Std of per-example gaussian noise on the grayscale pattern. Controls
    /// how hard the target is to read from the image.
    pub pattern_noise: f64,
}

impl BiasSpec {
    pub const DEFAULT_NOISE_STD: f64 = 0.05;
    pub const DEFAULT_PATTERN_LEN: usize = 64;
    pub const DEFAULT_PATTERN_NOISE: f64 = 0.5;

    pub fn new(num_targets: usize, num_bias: usize, rho: f64) -> Self {
        Self {
            num_targets,
            num_bias,
            rho,
            palette: default_palette(num_bias),
            noise_std: Self::DEFAULT_NOISE_STD,
            pattern_len: Self::DEFAULT_PATTERN_LEN,
            pattern_noise: Self::DEFAULT_PATTERN_NOISE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_targets < 2 {
            return fail(format!(
                "num_targets must be >= 2, got {}",
                self.num_targets
            ));
        }
        if self.num_bias < 2 {
            return fail(format!("num_bias must be >= 2, got {}", self.num_bias));
        }
        let lo = 1.0 / self.num_bias as f64;
        // Tolerate the rounding in a user-written 1/|B|.
        if !(self.rho >= lo - 1e-12 && self.rho <= 1.0) {
            return fail(format!("rho must lie in [{lo}, 1], got {}", self.rho));
        }
        if self.palette.len() != self.num_bias {
            return fail(format!(
                "palette has {} entries for {} bias classes",
                self.palette.len(),
                self.num_bias
            ));
        }
        if self
            .palette
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return fail("palette channels must lie in [0, 1]".into());
        }
        for i in 0..self.palette.len() {
            for j in i + 1..self.palette.len() {
                if self.palette[i] == self.palette[j] {
                    return fail(format!("palette entries {i} and {j} are identical"));
                }
            }
        }
        if [self.noise_std, self.pattern_noise]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return fail("noise levels must be >= 0".into());
        }
        if self.pattern_len == 0 {
            return fail("pattern_len must be positive".into());
        }
        Ok(())
    }
}

/// An ordered, immutable collection of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_targets: usize,
    pub num_bias: usize,
    pub feature_len: usize,
    pub provenance: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `counts[t][b]` = number of examples in cell `(t, b)`.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.num_bias]; self.num_targets];
        for ex in &self.examples {
            counts[ex.target][ex.bias] += 1;
        }
        counts
    }

    pub fn targets(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.target).collect()
    }

    pub fn biases(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.bias).collect()
    }

    /// Fraction of examples whose bias equals the target-aligned class.
    pub fn aligned_fraction(&self) -> f64 {
        let hits = self
            .examples
            .iter()
            .filter(|e| e.bias == aligned_bias(e.target, self.num_bias))
            .count();
        hits as f64 / self.len() as f64
    }

    fn derived(&self, examples: Vec<Example>, what: &str, seed: u64) -> Dataset {
        Dataset {
            examples,
            num_targets: self.num_targets,
            num_bias: self.num_bias,
            feature_len: self.feature_len,
            provenance: format!("{what} of [{}]", self.provenance),
            seed,
        }
    }

    fn cell_indices(&self) -> Vec<Vec<Vec<usize>>> {
        let mut cells = vec![vec![Vec::new(); self.num_bias]; self.num_targets];
        for (i, ex) in self.examples.iter().enumerate() {
            cells[ex.target][ex.bias].push(i);
        }
        cells
    }
}

/// Draws exactly `per_cell` examples from every `(t, b)` cell without
/// replacement, then shuffles the result.
pub fn fair_resample(d: &Dataset, per_cell: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_for(seed, "fair_resample");
    let cells = d.cell_indices();
    for (t, row) in cells.iter().enumerate() {
        for (b, idx) in row.iter().enumerate() {
            if idx.len() < per_cell {
                return Err(Error::DeficientCell {
                    target: t,
                    bias: b,
                    count: idx.len(),
                    needed: per_cell,
                });
            }
        }
    }
    let mut picked = Vec::with_capacity(per_cell * d.num_targets * d.num_bias);
    for row in &cells {
        for idx in row {
            picked.extend(idx.choose_multiple(&mut rng, per_cell).copied());
        }
    }
    picked.shuffle(&mut rng);
    let examples = picked.into_iter().map(|i| d.examples[i].clone()).collect();
    Ok(d.derived(examples, &format!("fair resample ({per_cell}/cell)"), seed))
}

/// Stratified split: every `(t, b)` cell is divided by `fractions`, so the
/// parts are disjoint, cover `d`, and keep cell proportions up to rounding.
pub fn split(d: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty()
        || fractions.iter().any(|&f| f.is_nan() || f <= 0.0)
        || (sum - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = rng_for(seed, "split");
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for row in d.cell_indices() {
        for mut idx in row {
            idx.shuffle(&mut rng);
            let n = idx.len() as f64;
            let mut start = 0;
            let mut cum = 0.0;
            for (k, f) in fractions.iter().enumerate() {
                cum += f;
                let end = if k + 1 == fractions.len() {
                    idx.len()
                } else {
                    ((cum * n).round() as usize).min(idx.len())
                };
                parts[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
    }
    Ok(parts
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.shuffle(&mut rng);
            let examples = idx.into_iter().map(|i| d.examples[i].clone()).collect();
            d.derived(examples, &format!("split part {k}"), seed)
        })
        .collect())
}
