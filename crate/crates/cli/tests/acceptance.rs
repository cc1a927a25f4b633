//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::time::Instant;

use rand::Rng as _;
use sdebias_cli::reproduce::{read_tables, reproduce, Reproduction, RHO_GRID};
use sdebias_cli::run::RunResult;
use sdebias_cli::ExperimentConfig;
use sdebias_core::diffcore::{Graph, Tensor, Var};
use sdebias_core::eval::{accuracy, counter_p, equalodds};
use sdebias_core::model::{init, intervened_logits, FairModel, ShortcutBank};
use sdebias_core::rng::{rng_for, Rng};
use sdebias_core::{Dataset, Example, ModelConfig, ShortcutMode, TrainMode};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

// ---------------------------------------------------------------------------
// 1. finite differences

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Entries bounded away from zero (ReLU kink).
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
    /// Expected ratio of the backward gradient to the forward derivative:
    /// 1 except for gradient reversal, whose backward pass is defined as
    /// `-lambda` times the upstream gradient.
    grad_factor: f64,
}

fn make_case(op: &str, rng: &mut Rng) -> Case {
    let n = rng.gen_range(1..5);
    let m = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let g = |rng: &mut Rng, r, c| random_tensor(rng, r, c, -1.5, 1.5);
    match op {
        "matmul" => Case {
            inputs: vec![g(rng, n, k), g(rng, k, m)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.matmul(v[0], v[1]).unwrap()),
        },
        "add" => Case {
            inputs: vec![g(rng, n, m), g(rng, n, m)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.add(v[0], v[1]).unwrap()),
        },
        "sub" => Case {
            inputs: vec![g(rng, n, m), g(rng, n, m)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.sub(v[0], v[1]).unwrap()),
        },
        "mul" => Case {
            inputs: vec![g(rng, n, m), g(rng, n, m)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.mul(v[0], v[1]).unwrap()),
        },
        "add_row" => Case {
            inputs: vec![g(rng, n, m), Tensor::vector(g(rng, 1, m).into_data())],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.add_row(v[0], v[1]).unwrap()),
        },
        "relu" => Case {
            inputs: vec![away_from_zero(rng, n, m)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.relu(v[0]).unwrap()),
        },
        "concat" => Case {
            inputs: vec![g(rng, n, m), g(rng, n, k)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.concat(v[0], v[1]).unwrap()),
        },
        "slice_rows" => {
            let rows = n + 1;
            let start = rng.gen_range(0..rows);
            let end = rng.gen_range(start + 1..=rows);
            Case {
                inputs: vec![g(rng, rows, m)],
                grad_factor: 1.0,
                build: Box::new(move |gr, v| gr.slice_rows(v[0], start, end).unwrap()),
            }
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..n)).collect();
            Case {
                inputs: vec![g(rng, n, m)],
                grad_factor: 1.0,
                build: Box::new(move |gr, v| gr.gather_rows(v[0], &idx).unwrap()),
            }
        }
        "softmax" => Case {
            inputs: vec![random_tensor(rng, n, m + 1, -2.0, 2.0)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.softmax(v[0]).unwrap()),
        },
        "cross_entropy" => {
            let classes = m + 1;
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            Case {
                inputs: vec![random_tensor(rng, n, classes, -2.0, 2.0)],
                grad_factor: 1.0,
                build: Box::new(move |gr, v| gr.cross_entropy(v[0], &targets).unwrap()),
            }
        }
        "neg" => Case {
            inputs: vec![g(rng, n, m)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.neg(v[0]).unwrap()),
        },
        "log" => Case {
            inputs: vec![random_tensor(rng, n, m, 0.3, 2.0)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.log(v[0]).unwrap()),
        },
        "scale" => {
            let s: f64 = rng.gen_range(-2.0..2.0);
            Case {
                inputs: vec![g(rng, n, m)],
                grad_factor: 1.0,
                build: Box::new(move |gr, v| gr.scale(v[0], s).unwrap()),
            }
        }
        "mean" => Case {
            inputs: vec![g(rng, n, m)],
            grad_factor: 1.0,
            build: Box::new(|gr, v| gr.mean(v[0]).unwrap()),
        },
        "grad_reverse" => {
            let lambda: f64 = rng.gen_range(0.0..2.0);
            Case {
                inputs: vec![g(rng, n, m)],
                grad_factor: -lambda,
                build: Box::new(move |gr, v| gr.grad_reverse(v[0], lambda).unwrap()),
            }
        }
        _ => unreachable!("unknown op {op}"),
    }
}

/// Scalar probe `sum(out * weights)` with fixed random weights.
fn probe(case: &Case, inputs: &[Tensor], weights: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights[..g.value(out).len()].to_vec()).unwrap());
    let prod = g.mul(out, w).unwrap();
    let avg = g.mean(prod).unwrap();
    let count = g.value(prod).len() as f64;
    let root = g.scale(avg, count).unwrap();
    let value = g.value(root).item();
    g.backward(root).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.len()], |t| t.data().to_vec()))
        .collect();
    (value, grads)
}

fn criterion_1() -> Outcome {
    const OPS: [&str; 16] = [
        "matmul",
        "add",
        "sub",
        "mul",
        "add_row",
        "relu",
        "concat",
        "slice_rows",
        "gather_rows",
        "softmax",
        "cross_entropy",
        "neg",
        "log",
        "scale",
        "mean",
        "grad_reverse",
    ];
    const CASES: usize = 100;
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = rng_for(1, "acceptance/finite-differences");
    let mut failures = Vec::new();
    let mut checked = 0usize;
    for op in OPS {
        for case_no in 0..CASES {
            let case = make_case(op, &mut rng);
            let weights: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, analytic) = probe(&case, &case.inputs, &weights);
            for (i, input) in case.inputs.iter().enumerate() {
                for (j, &a) in analytic[i].iter().enumerate().take(input.len()) {
                    let shifted = |delta: f64| {
                        let mut ins = case.inputs.clone();
                        ins[i].data_mut()[j] += delta;
                        probe(&case, &ins, &weights).0
                    };
                    let numeric = case.grad_factor * (shifted(H) - shifted(-H)) / (2.0 * H);
                    let err = (a - numeric).abs();
                    checked += 1;
                    if err > 1e-4 * a.abs().max(numeric.abs()) && err > 1e-7 {
                        failures.push(format!(
                            "{op} case {case_no} input {i}[{j}]: {a} vs {numeric}"
                        ));
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 60.0,
        format!(
            "{} ops x {CASES} cases, {checked} partials, {} mismatches{}; {secs:.1}s (limit 60s)",
            OPS.len(),
            failures.len(),
            failures
                .first()
                .map_or(String::new(), |f| format!(" (first: {f})"))
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. metrics against counting oracles

fn oracle_equalodds(
    preds: &[usize],
    targets: &[usize],
    biases: &[usize],
    nt: usize,
    nb: usize,
) -> f64 {
    let recall = |t: usize, b: usize| {
        let cell: Vec<usize> = (0..preds.len())
            .filter(|&i| targets[i] == t && biases[i] == b)
            .collect();
        cell.iter().filter(|&&i| preds[i] == t).count() as f64 / cell.len() as f64
    };
    let mut per_class = 0.0;
    for t in 0..nt {
        let (mut sum, mut pairs) = (0.0, 0.0);
        for b in 0..nb {
            for b2 in b + 1..nb {
                sum += (recall(t, b) - recall(t, b2)).abs();
                pairs += 1.0;
            }
        }
        per_class += sum / pairs;
    }
    per_class / nt as f64
}

/// Literal binary form: mean over t of |Pr_b0(pred=1 | T=t) - Pr_b1(pred=1 | T=t)|.
fn oracle_equalodds_binary(preds: &[usize], targets: &[usize], biases: &[usize]) -> f64 {
    let rate = |t: usize, b: usize| {
        let cell: Vec<usize> = (0..preds.len())
            .filter(|&i| targets[i] == t && biases[i] == b)
            .collect();
        cell.iter().filter(|&&i| preds[i] == 1).count() as f64 / cell.len() as f64
    };
    ((rate(0, 0) - rate(0, 1)).abs() + (rate(1, 0) - rate(1, 1)).abs()) / 2.0
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// `x W + b` with explicit loops.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|c| {
            b.data()[c]
                + x.iter()
                    .enumerate()
                    .map(|(r, xi)| xi * w.at(r, c))
                    .sum::<f64>()
        })
        .collect()
}

fn oracle_logits(m: &FairModel, x: &[f64], p: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(x, &m.enc_w1, &m.enc_b1)
        .into_iter()
        .map(relu)
        .collect();
    let mut z: Vec<f64> = affine(&h, &m.enc_w2, &m.enc_b2)
        .into_iter()
        .map(relu)
        .collect();
    z.extend_from_slice(p);
    affine(&z, &m.head_w, &m.head_b)
}

fn oracle_softmax(l: &[f64]) -> Vec<f64> {
    let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_counter_p(m: &FairModel, bank: &ShortcutBank, d: &Dataset) -> f64 {
    let nb = bank.num_bias();
    let (mut total, mut pairs) = (0.0, 0.0);
    for b in 0..nb {
        for b2 in b + 1..nb {
            let mut sum = 0.0;
            for e in &d.examples {
                let p1 = oracle_softmax(&oracle_logits(m, &e.features, bank.vector(b)))[e.target];
                let p2 = oracle_softmax(&oracle_logits(m, &e.features, bank.vector(b2)))[e.target];
                sum += (p1 - p2).abs();
            }
            total += sum / d.len() as f64;
            pairs += 1.0;
        }
    }
    total / pairs
}

fn small_model(rng: &mut Rng, seed: u64, nt: usize, nb: usize) -> (FairModel, ShortcutBank) {
    let mut c = ModelConfig::new(rng.gen_range(2..6), nt, nb, ShortcutMode::Trainable);
    c.hidden = rng.gen_range(2..7);
    c.repr_dim = rng.gen_range(2..5);
    c.shortcut_dim = rng.gen_range(1..5);
    let (mut m, bank) = init(&c, seed).unwrap();
    // Head weights wider than the default initialization.
    m.head_w = m.head_w.map(|v| 4.0 * v);
    (m, bank.unwrap())
}

fn criterion_2() -> Outcome {
    let mut rng = rng_for(2, "acceptance/metrics");
    let mut worst: f64 = 0.0;
    let mut errors = Vec::new();
    for set in 0..50u64 {
        let nt = rng.gen_range(2..5);
        let nb = rng.gen_range(2..4);
        let n = nt * nb + rng.gen_range(0..40);
        // Every cell gets at least one example.
        let (targets, biases): (Vec<usize>, Vec<usize>) = (0..n)
            .map(|i| {
                if i < nt * nb {
                    (i / nb, i % nb)
                } else {
                    (rng.gen_range(0..nt), rng.gen_range(0..nb))
                }
            })
            .unzip();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..nt)).collect();

        let eo = equalodds(&preds, &targets, &biases, nt, nb).unwrap();
        worst = worst.max((eo - oracle_equalodds(&preds, &targets, &biases, nt, nb)).abs());
        if nt == 2 && nb == 2 {
            worst = worst.max((eo - oracle_equalodds_binary(&preds, &targets, &biases)).abs());
        }
        let acc = accuracy(&preds, &targets).unwrap();
        let oracle_acc =
            preds.iter().zip(&targets).filter(|(p, t)| p == t).count() as f64 / n as f64;
        worst = worst.max((acc - oracle_acc).abs());

        let (model, bank) = small_model(&mut rng, set, nt, nb);
        let examples = (0..n.min(30))
            .map(|i| Example {
                features: (0..model.config.feature_len)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect(),
                target: targets[i],
                bias: biases[i],
            })
            .collect();
        let d = Dataset {
            examples,
            num_targets: nt,
            num_bias: nb,
            feature_len: model.config.feature_len,
            provenance: "acceptance".into(),
            seed: set,
        };
        match counter_p(&model, &bank, &d) {
            Ok(cp) => worst = worst.max((cp - oracle_counter_p(&model, &bank, &d)).abs()),
            Err(e) => errors.push(e.to_string()),
        }
    }
    outcome(
        worst <= 1e-12 && errors.is_empty(),
        format!(
            "50 random sets; max |metric - oracle| = {worst:.2e} (limit 1e-12){}",
            if errors.is_empty() {
                String::new()
            } else {
                format!("; errors: {errors:?}")
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. intervention identity

fn criterion_3() -> Outcome {
    let mut rng = rng_for(3, "acceptance/intervention");
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let nt = rng.gen_range(2..6);
        let nb = rng.gen_range(2..6);
        let (model, bank) = small_model(&mut rng, seed, nt, nb);
        for _ in 0..5 {
            let x: Vec<f64> = (0..model.config.feature_len)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let got = intervened_logits(&model, &bank, &x).unwrap();
            let per_b: Vec<Vec<f64>> = (0..nb)
                .map(|b| oracle_logits(&model, &x, bank.vector(b)))
                .collect();
            for c in 0..nt {
                let avg = per_b.iter().map(|l| l[c]).sum::<f64>() / nb as f64;
                worst = worst.max((got[c] - avg).abs());
            }
        }
    }
    outcome(
        worst <= 1e-9,
        format!("20 random models x 5 inputs; max deviation {worst:.2e} (limit 1e-9)"),
    )
}

// ---------------------------------------------------------------------------
// 4 to 11. end-to-end reproduction

fn mean_of(runs: &[RunResult], f: impl Fn(&RunResult) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn eo(runs: &[RunResult]) -> f64 {
    mean_of(runs, |r| r.report.equalodds)
}

fn fair(runs: &[RunResult]) -> f64 {
    mean_of(runs, |r| r.report.fair_acc)
}

fn criterion_4(r: &Reproduction) -> Outcome {
    let v = r.main_runs(TrainMode::Vanilla);
    let slowest = r
        .main
        .iter()
        .flat_map(|(_, runs)| runs)
        .map(|x| x.seconds)
        .fold(0.0, f64::max);
    outcome(
        eo(v) >= 0.15 && slowest <= 300.0,
        format!("vanilla equalodds {:.4} over {} seeds (need >= 0.15); slowest run {slowest:.1}s (limit 300s)", eo(v), v.len()),
    )
}

fn criterion_5(r: &Reproduction) -> Outcome {
    let (v, a) = (
        r.main_runs(TrainMode::Vanilla),
        r.main_runs(TrainMode::ActiveSd),
    );
    let reduction = 1.0 - eo(a) / eo(v);
    outcome(
        reduction >= 0.5 && fair(a) >= fair(v) - 0.02,
        format!(
            "equalodds {:.4} -> {:.4} ({:.0}% reduction, need >= 50%); fair acc {:.4} vs vanilla {:.4} (may drop <= 0.02)",
            eo(v),
            eo(a),
            100.0 * reduction,
            fair(a),
            fair(v)
        ),
    )
}

fn criterion_6(r: &Reproduction) -> Outcome {
    let (n, a) = (
        r.main_runs(TrainMode::NaiveSd),
        r.main_runs(TrainMode::ActiveSd),
    );
    let pairs: Vec<(f64, f64)> = n
        .iter()
        .zip(a)
        .map(|(n, a)| (a.report.counter_p.unwrap(), n.report.counter_p.unwrap()))
        .collect();
    let every = pairs.iter().all(|(a, n)| a > n);
    outcome(
        every && eo(a) < eo(n),
        format!(
            "counter_p active vs naive per seed {:?}; equalodds active {:.4} vs naive {:.4}",
            pairs
                .iter()
                .map(|(a, n)| format!("{a:.4}>{n:.4}"))
                .collect::<Vec<_>>(),
            eo(a),
            eo(n)
        ),
    )
}

fn criterion_7(r: &Reproduction) -> Outcome {
    let (a, adv) = (
        r.main_runs(TrainMode::ActiveSd),
        r.main_runs(TrainMode::Adversarial),
    );
    outcome(
        eo(a) <= eo(adv),
        format!(
            "equalodds active {:.4} vs adversarial {:.4}",
            eo(a),
            eo(adv)
        ),
    )
}

fn criterion_8(r: &Reproduction) -> Outcome {
    let runs = |rho: f64, mode: TrainMode| {
        &r.rho_sweep
            .iter()
            .find(|(x, m, _)| *x == rho && *m == mode)
            .expect("sweep point")
            .2
    };
    let mut fair_ok = true;
    let mut gaps = Vec::new();
    let mut text = Vec::new();
    for rho in RHO_GRID {
        let (v, a) = (
            runs(rho, TrainMode::Vanilla),
            runs(rho, TrainMode::ActiveSd),
        );
        if rho >= 0.9 && fair(a) < fair(v) {
            fair_ok = false;
        }
        gaps.push(eo(v) - eo(a));
        text.push(format!(
            "rho {rho}: gap {:.4}, fair {:.4}/{:.4}",
            eo(v) - eo(a),
            fair(a),
            fair(v)
        ));
    }
    let inversions = gaps.windows(2).filter(|w| w[1] < w[0]).count();
    outcome(
        fair_ok && inversions <= 1,
        format!("{}; {inversions} inversion(s) (allow 1)", text.join("; ")),
    )
}

fn criterion_9(r: &Reproduction) -> Outcome {
    let eos: Vec<(usize, f64)> = r.dim_sweep.iter().map(|(d, runs)| (*d, eo(runs))).collect();
    let hi = eos.iter().map(|x| x.1).fold(f64::MIN, f64::max);
    let lo = eos.iter().map(|x| x.1).fold(f64::MAX, f64::min);
    outcome(
        eos.len() == 4 && hi - lo <= 0.05,
        format!(
            "active equalodds by shortcut_dim {:?}; spread {:.4} (limit 0.05)",
            eos.iter()
                .map(|(d, e)| format!("{d}:{e:.4}"))
                .collect::<Vec<_>>(),
            hi - lo
        ),
    )
}

fn criterion_10(r: &Reproduction) -> Outcome {
    let runs = |mode| {
        &r.multiclass
            .iter()
            .find(|(m, _)| *m == mode)
            .expect("multiclass mode")
            .1
    };
    let (v, a) = (runs(TrainMode::Vanilla), runs(TrainMode::ActiveSd));
    let secs: f64 = v.iter().chain(a.iter()).map(|x| x.seconds).sum();
    outcome(
        eo(a) < eo(v) && secs <= 900.0,
        format!(
            "10-way equalodds active {:.4} vs vanilla {:.4}; {secs:.0}s of training (limit 900s)",
            eo(a),
            eo(v)
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!(
            "criterion {n:>2} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());

    let first_dir = tempfile::tempdir().expect("tempdir");
    let second_dir = tempfile::tempdir().expect("tempdir");
    let base = |dir: &std::path::Path| ExperimentConfig {
        out: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let first = reproduce(&base(first_dir.path())).expect("reproduce");
    report(4, criterion_4(&first));
    report(5, criterion_5(&first));
    report(6, criterion_6(&first));
    report(7, criterion_7(&first));
    report(8, criterion_8(&first));
    report(9, criterion_9(&first));
    report(10, criterion_10(&first));

    let second = reproduce(&base(second_dir.path())).expect("reproduce");
    let (a, b) = (
        read_tables(first_dir.path()).unwrap(),
        read_tables(second_dir.path()).unwrap(),
    );
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    report(
        11,
        outcome(
            differing.is_empty(),
            format!(
                "{} summary tables compared byte for byte, {} differ {differing:?}; reproduce took {:.0}s and {:.0}s (budget 3600s each)",
                a.len(),
                differing.len(),
                first.seconds,
                second.seconds
            ),
        ),
    );
    let budget_ok = first.seconds <= 3600.0 && second.seconds <= 3600.0;
    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, o)| !o.passed)
        .map(|(n, _)| *n)
        .collect();
    if !budget_ok {
        println!("reproduce exceeded the 3600s budget");
    }
    if failed.is_empty() && budget_ok {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
