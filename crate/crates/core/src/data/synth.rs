use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{BiasSpec, Dataset, Example};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Rng};

/// Root of the per-target template streams, shared by every dataset.
const TEMPLATE_ROOT: u64 = 0x5EED_7E3B_1A7E;

/// Bias class a target is aligned with: `t mod |B|`.
pub fn aligned_bias(target: usize, num_bias: usize) -> usize {
    target % num_bias
}

/// Evenly spaced hues at saturation 0.6. Every channel of every tint stays
/// at or above 0.4.
pub fn default_palette(num_bias: usize) -> Vec<[f64; 3]> {
    const SATURATION: f64 = 0.6;
    (0..num_bias)
        .map(|b| {
            let hue = b as f64 / num_bias as f64;
            let rgb = |shift: f64| {
                let k = (shift + hue * 6.0) % 6.0;
                let w = (k.min(4.0 - k)).clamp(0.0, 1.0);
                1.0 - SATURATION * w
            };
            [rgb(5.0), rgb(3.0), rgb(1.0)]
        })
        .collect()
}

/// Deterministic grayscale pattern for `target`, values in `[0.2, 0.8]`.
pub fn pattern_template(target: usize, len: usize) -> Vec<f64> {
    let mut rng = rng_for(derive_seed(TEMPLATE_ROOT, &target.to_string()), "template");
    (0..len).map(|_| rng.gen_range(0.2..0.8)).collect()
}

/// Samples a bias class for `target`: the aligned class with probability
/// `rho`, otherwise uniform over the other classes.
fn sample_bias(rng: &mut Rng, target: usize, spec: &BiasSpec) -> usize {
    let aligned = aligned_bias(target, spec.num_bias);
    if rng.gen::<f64>() < spec.rho {
        return aligned;
    }
    let other = rng.gen_range(0..spec.num_bias - 1);
    if other >= aligned {
        other + 1
    } else {
        other
    }
}

fn tint(gray: &[f64], color: [f64; 3], noise: Option<&Normal<f64>>, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(gray.len() * 3);
    for channel in color {
        for &g in gray {
            let jitter = noise.map_or(0.0, |n| n.sample(rng));
            out.push((g * channel + jitter).clamp(0.0, 1.0));
        }
    }
    out
}

fn normal(std: f64) -> Option<Normal<f64>> {
    (std > 0.0).then(|| Normal::new(0.0, std).expect("std is finite and positive"))
}

/// Generates `n` color-biased examples: uniform targets, noisy per-target
/// grayscale patterns, tinted by the palette color of the sampled bias.
pub fn make_synthetic(spec: &BiasSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.num_targets * spec.num_bias {
        return Err(Error::InvalidSpec(format!(
            "n = {n} is smaller than the {} (t, b) cells",
            spec.num_targets * spec.num_bias
        )));
    }
    let templates: Vec<Vec<f64>> = (0..spec.num_targets)
        .map(|t| pattern_template(t, spec.pattern_len))
        .collect();
    let mut rng = rng_for(seed, "make_synthetic");
    let pattern_noise = normal(spec.pattern_noise);
    let color_noise = normal(spec.noise_std);

    let examples = (0..n)
        .map(|_| {
            let target = rng.gen_range(0..spec.num_targets);
            let bias = sample_bias(&mut rng, target, spec);
            let gray: Vec<f64> = templates[target]
                .iter()
                .map(|&v| {
                    let jitter = pattern_noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                    (v + jitter).clamp(0.0, 1.0)
                })
                .collect();
            let features = tint(&gray, spec.palette[bias], color_noise.as_ref(), &mut rng);
            Example {
                features,
                target,
                bias,
            }
        })
        .collect();

    Ok(Dataset {
        examples,
        num_targets: spec.num_targets,
        num_bias: spec.num_bias,
        feature_len: 3 * spec.pattern_len,
        provenance: format!(
            "synthetic |T|={} |B|={} rho={} noise_std={} pattern_len={} pattern_noise={}",
            spec.num_targets,
            spec.num_bias,
            spec.rho,
            spec.noise_std,
            spec.pattern_len,
            spec.pattern_noise
        ),
        seed,
    })
}

/// Assigns a bias class to every grayscale example and tints it with that
/// class's palette color. Targets are preserved.
pub fn inject_color_bias(base: &Dataset, spec: &BiasSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if base.num_targets != spec.num_targets {
        return Err(Error::InvalidSpec(format!(
            "dataset has {} targets, spec declares {}",
            base.num_targets, spec.num_targets
        )));
    }
    let mut rng = rng_for(seed, "inject_color_bias");
    let color_noise = normal(spec.noise_std);
    let examples = base
        .examples
        .iter()
        .map(|ex| {
            let bias = sample_bias(&mut rng, ex.target, spec);
            Example {
                features: tint(
                    &ex.features,
                    spec.palette[bias],
                    color_noise.as_ref(),
                    &mut rng,
                ),
                target: ex.target,
                bias,
            }
        })
        .collect();
    Ok(Dataset {
        examples,
        num_targets: spec.num_targets,
        num_bias: spec.num_bias,
        feature_len: 3 * base.feature_len,
        provenance: format!(
            "color bias rho={} noise_std={} on [{}]",
            spec.rho, spec.noise_std, base.provenance
        ),
        seed,
    })
}
