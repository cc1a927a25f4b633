use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sdebias_cli::commands::{
    cmd_dump_embeddings, cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, data_dir, SweepKind,
};
use sdebias_cli::config::DataSource;
use sdebias_cli::data::{manifest_value, read_bundle, PARTS};
use sdebias_cli::ExperimentConfig;
use sdebias_core::{FairnessReport, TrainLog, TrainMode};

fn tiny(out: &Path, mode: TrainMode) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(
        "dataset.n_train=600\ndataset.n_val=200\ndataset.n_test=200\ndataset.per_cell=30\n\
         dataset.val_per_cell=10\ndataset.pattern_len=16\nmodel.hidden=16\nmodel.repr_dim=8\n\
         train.epochs=2\ntrain.batch_size=64\nrepeat=3\n",
    )
    .unwrap();
    c.out = out.to_path_buf();
    c.train.mode = mode;
    c
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn shipped_binary_preset_matches_defaults() {
    let preset = ExperimentConfig::load(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/binary.cfg"
    )))
    .unwrap();
    let defaults = ExperimentConfig {
        out: "out/binary".into(),
        ..ExperimentConfig::default()
    };
    assert_eq!(preset, defaults);
    for name in ["multiclass.cfg", "smoke.cfg"] {
        let path = format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"));
        ExperimentConfig::load(Path::new(&path))
            .unwrap()
            .validate()
            .unwrap();
    }
}

#[test]
fn generate_is_byte_identical_and_documents_itself() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = tiny(a.path(), TrainMode::ActiveSd);
    cmd_generate(&ca).unwrap();
    cmd_generate(&tiny(b.path(), TrainMode::ActiveSd)).unwrap();
    let (fa, fb) = (
        read_dir_bytes(&data_dir(&ca)),
        read_dir_bytes(&b.path().join("data")),
    );
    assert_eq!(fa.len(), PARTS.len() + 1);
    assert_eq!(fa, fb);

    let manifest = fs::read_to_string(data_dir(&ca).join("manifest.txt")).unwrap();
    assert_eq!(manifest_value(&manifest, "rho").unwrap(), "0.99");
    assert_eq!(manifest_value(&manifest, "config_hash").unwrap(), ca.hash());
    assert_eq!(manifest_value(&manifest, "seed").unwrap(), "0");
    for part in PARTS {
        assert!(manifest_value(&manifest, &format!("{part}.seed")).is_some());
        assert!(manifest_value(&manifest, &format!("{part}.cells")).is_some());
    }
    assert_eq!(
        manifest_value(&manifest, "test_fair.cells").unwrap(),
        "[[30, 30], [30, 30]]"
    );
    assert_eq!(
        manifest_value(&manifest, "val_fair.cells").unwrap(),
        "[[10, 10], [10, 10]]"
    );
    let train_cells = manifest_value(&manifest, "train.cells").unwrap();
    assert_ne!(train_cells, "[[150, 150], [150, 150]]");

    for (name, bytes) in fa {
        let text = String::from_utf8(bytes).unwrap();
        assert!(
            text.starts_with(&format!("# config_hash={}\n# seed=0\n", ca.hash())),
            "{name}"
        );
    }
}

#[test]
fn generated_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path(), TrainMode::Vanilla);
    let bundle = cmd_generate(&c).unwrap();
    let back = read_bundle(&c, &data_dir(&c)).unwrap();
    for ((name, a), (_, b)) in bundle.parts().iter().zip(back.parts()) {
        assert_eq!(a.len(), b.len(), "{name}");
        assert_eq!(a.cell_counts(), b.cell_counts(), "{name}");
    }
    let mut other = c.clone();
    other.dataset.rho = 0.9;
    let err = read_bundle(&other, &data_dir(&c)).unwrap_err().to_string();
    assert!(err.contains("rerun `generate`"), "{err}");
}

#[test]
fn train_writes_every_repeat_and_an_aggregate_row() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path(), TrainMode::ActiveSd);
    cmd_generate(&c).unwrap();
    let out = cmd_train(&c).unwrap();
    assert_eq!(out.runs.len(), 3);
    for r in 0..3 {
        let run = dir.path().join(format!("runs/active_sd/run{r}"));
        for f in [
            "checkpoint.txt",
            "train_log.csv",
            "report.csv",
            "report.txt",
        ] {
            assert!(run.join(f).exists(), "{f}");
        }
        let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
        assert!(log.starts_with(&format!("# config_hash={}\n# seed=0\n", c.hash())));
        assert!(log.contains(TrainLog::CSV_HEADER));
        assert_eq!(
            log.lines().filter(|l| !l.starts_with('#')).count(),
            1 + c.train.epochs
        );
    }

    // Aggregate row against an independent mean of the per-run rows.
    let summary = fs::read_to_string(&out.summary_path).unwrap();
    let rows: Vec<Vec<&str>> = summary
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 5);
    for col in 3..7 {
        let values: Vec<f64> = rows[..3].iter().map(|r| r[col].parse().unwrap()).collect();
        let mean: f64 = values.iter().sum::<f64>() / 3.0;
        let reported: f64 = rows[3][col].parse().unwrap();
        assert_eq!(rows[3][1], "mean");
        assert!(
            (mean - reported).abs() <= 1.5e-6,
            "column {col}: {mean} vs {reported}"
        );
    }
    assert_eq!(rows[4][1], "std");

    let snapshot = |r: usize| read_dir_bytes(&dir.path().join(format!("runs/active_sd/run{r}")));
    let before: Vec<_> = (0..3).map(snapshot).collect();
    cmd_train(&c).unwrap();
    assert_eq!(before, (0..3).map(snapshot).collect::<Vec<_>>());
    assert_eq!(summary, fs::read_to_string(&out.summary_path).unwrap());
}

#[test]
fn vanilla_with_shortcut_dim_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), TrainMode::Vanilla);
    c.model.shortcut_dim = Some(100);
    let err = cmd_train(&c).err().expect("rejected").to_string();
    assert!(
        err.contains("model.shortcut_dim=100") && err.contains("vanilla"),
        "{err}"
    );
}

#[test]
fn train_without_data_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_train(&tiny(dir.path(), TrainMode::Vanilla))
        .err()
        .expect("no data")
        .to_string();
    assert!(err.contains("generate"), "{err}");
}

#[test]
fn evaluate_is_repeatable_and_matches_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), TrainMode::NaiveSd);
    c.repeat = 1;
    cmd_generate(&c).unwrap();
    let trained = cmd_train(&c).unwrap();
    let first = cmd_evaluate(&c, None).unwrap();
    let run = dir.path().join("runs/naive_sd/run0");
    let bytes = fs::read(run.join("eval.csv")).unwrap();
    let second = cmd_evaluate(&c, Some(&run.join("checkpoint.txt"))).unwrap();
    assert_eq!(bytes, fs::read(run.join("eval.csv")).unwrap());
    assert_eq!(first[0].1, second[0].1);

    // Reloaded features carry six decimals.
    let a = &first[0].1;
    let b = &trained.runs[0].report;
    assert!((a.equalodds - b.equalodds).abs() < 0.05);

    let text = String::from_utf8(bytes).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(
        header,
        format!("mode,run,seed,{}", FairnessReport::CSV_HEADER)
    );
    assert!(run.join("eval.txt").exists());
}

#[test]
fn evaluate_without_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path(), TrainMode::Vanilla);
    cmd_generate(&c).unwrap();
    assert!(cmd_evaluate(&c, None).is_err());
}

#[test]
fn embeddings_have_one_row_per_fair_test_example() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), TrainMode::ActiveSd);
    c.repeat = 1;
    cmd_generate(&c).unwrap();
    cmd_train(&c).unwrap();
    let paths = cmd_dump_embeddings(&c, None).unwrap();
    let text = fs::read_to_string(&paths[0]).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 120);
    assert!(rows
        .iter()
        .all(|r| r.split(',').count() == c.model.repr_dim + 2));
    let before = fs::read(&paths[0]).unwrap();
    cmd_dump_embeddings(&c, None).unwrap();
    assert_eq!(before, fs::read(&paths[0]).unwrap());
}

#[test]
fn rho_sweep_has_a_row_per_mode_point_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), TrainMode::ActiveSd);
    c.repeat = 2;
    c.train.epochs = 1;
    let out = cmd_sweep(&c, SweepKind::Rho, &[0.5, 0.7, 0.9]).unwrap();
    let rows: Vec<&str> = out
        .table
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    let per_run = rows
        .iter()
        .filter(|r| !r.contains(",mean,") && !r.contains(",std,"))
        .count();
    assert_eq!(per_run, 2 * 3 * 2);
    assert_eq!(rows.len(), per_run + 2 * 3 * 2);
    assert!(out
        .table
        .contains("rho,mode,run,seed,bias_acc,fair_acc,equalodds,counter_p"));
    assert!(out.table_path.exists());
    assert!(dir
        .path()
        .join("rho_0.7/runs/vanilla/run1/checkpoint.txt")
        .exists());
}

#[test]
fn dim_sweep_reports_counter_p_and_equalodds_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), TrainMode::ActiveSd);
    c.repeat = 1;
    c.train.epochs = 1;
    let out = cmd_sweep(&c, SweepKind::ShortcutDim, &[10.0, 50.0, 100.0, 200.0]).unwrap();
    let mut lines = out.table.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (eo, cp) = (
        header.iter().position(|h| *h == "equalodds").unwrap(),
        header.iter().position(|h| *h == "counter_p").unwrap(),
    );
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(["10", "50", "100", "200"].contains(&cells[0]), "{line}");
        assert!(!cells[eo].is_empty() && !cells[cp].is_empty(), "{line}");
    }
    assert!(cmd_sweep(&c, SweepKind::ShortcutDim, &[]).is_err());
    assert!(cmd_sweep(&c, SweepKind::ShortcutDim, &[2.5]).is_err());
}

#[test]
fn idx_source_generates_colored_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    let n = 400;
    let imgs: Vec<Vec<u8>> = (0..n).map(|i| vec![(i * 7 % 256) as u8; 4]).collect();
    let labs: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    sdebias_core::data::write_idx(&images, &labels, 2, 2, &imgs, &labs).unwrap();
    let mut c = tiny(dir.path(), TrainMode::Vanilla);
    c.dataset.source = DataSource::Idx { images, labels };
    c.dataset.n_train = 200;
    c.dataset.n_val = 40;
    c.dataset.n_test = 40;
    c.dataset.per_cell = 5;
    c.dataset.val_per_cell = 5;
    let b = cmd_generate(&c).unwrap();
    assert_eq!(b.train.len(), 200);
    assert_eq!(b.train.feature_len, 12);
    assert_eq!(b.test_fair.cell_counts(), vec![vec![5, 5], vec![5, 5]]);
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (2usize..6, 2usize..6, 0.0f64..1.0, 0.0f64..0.3, 1usize..100),
        (
            1usize..5000,
            1usize..9,
            proptest::option::of(1usize..300),
            0usize..4,
            any::<bool>(),
        ),
        (
            1e-5f64..1e-1,
            1usize..300,
            0.0f64..3.0,
            any::<u64>(),
            1usize..6,
        ),
    )
        .prop_map(
            |((nt, nb, r, noise, plen), (n, mode, dim, ratio, fresh), (lr, bs, lam, seed, rep))| {
                let mut c = ExperimentConfig::default();
                c.dataset.num_targets = nt;
                c.dataset.num_bias = nb;
                c.dataset.rho = 1.0 / nb as f64 + r * (1.0 - 1.0 / nb as f64);
                c.dataset.noise_std = noise;
                c.dataset.pattern_len = plen;
                c.dataset.n_train = n;
                c.model.hidden = mode * 3;
                c.model.shortcut_dim = dim;
                c.train.mode = TrainMode::ALL[mode % 4];
                c.train.enhancement_ratio = ratio;
                c.train.fresh_enhancement_batch = fresh;
                c.train.lr = lr;
                c.train.batch_size = bs;
                c.train.adv_lambda = lam;
                c.seed = seed;
                c.repeat = rep;
                c.out = format!("out/{seed}").into();
                c
            },
        )
}

proptest! {
    #[test]
    fn config_parse_serialize_round_trips(c in arb_config()) {
        let text = c.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.serialize(), text);
        prop_assert_eq!(back.hash(), c.hash());
    }
}
