use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "dataset.n_train=600\ndataset.n_val=200\ndataset.n_test=200\n\
dataset.per_cell=30\ndataset.val_per_cell=10\ndataset.pattern_len=16\nmodel.hidden=16\n\
model.repr_dim=8\ntrain.epochs=1\ntrain.batch_size=64\nrepeat=1\n";

fn sdebias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdebias"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    let g = sdebias(&["generate", "--config", &cfg, "--out", o, "--seed", "7"]);
    assert!(g.status.success(), "{}", stderr(&g));
    let manifest = fs::read_to_string(out.join("data/manifest.txt")).unwrap();
    assert!(
        manifest.contains("\nseed=7\n") || manifest.starts_with("seed=7\n"),
        "{manifest}"
    );

    let t = sdebias(&[
        "train", "--config", &cfg, "--out", o, "--seed", "7", "--mode", "naive_sd", "--repeat", "2",
    ]);
    assert!(t.status.success(), "{}", stderr(&t));
    assert!(out.join("runs/naive_sd/run1/checkpoint.txt").exists());
    assert!(!out.join("runs/naive_sd/run2").exists());
    assert!(out.join("runs/naive_sd/summary.csv").exists());

    let e = sdebias(&[
        "evaluate", "--config", &cfg, "--out", o, "--seed", "7", "--mode", "naive_sd", "--repeat",
        "2",
    ]);
    assert!(e.status.success(), "{}", stderr(&e));
    let d = sdebias(&[
        "dump-embeddings",
        "--config",
        &cfg,
        "--out",
        o,
        "--seed",
        "7",
        "--mode",
        "naive_sd",
        "--repeat",
        "2",
    ]);
    assert!(d.status.success(), "{}", stderr(&d));
    assert!(out.join("runs/naive_sd/run0/embeddings.csv").exists());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.shortcut_dim=100\n");
    let o = sdebias(&["train", "--config", &cfg, "--mode", "vanilla"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.shortcut_dim=100 is not allowed with train.mode=vanilla"));

    let o = sdebias(&["train", "--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sideways"));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.nope=1\n").unwrap();
    let o = sdebias(&["generate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.nope"));
}

#[test]
fn reproduce_exits_with_code_two_when_checks_fail() {
    // A zero learning rate leaves every model at its initialization.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.lr=0\n");
    let out = dir.path().join("r");
    let o = sdebias(&[
        "reproduce",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let checks = fs::read_to_string(out.join("summary/checks.txt")).unwrap();
    assert!(checks.contains("FAIL"), "{checks}");
    for table in [
        "table.csv",
        "ablation.csv",
        "rho_sweep.csv",
        "dim_sweep.csv",
        "multiclass.csv",
    ] {
        let text = fs::read_to_string(out.join("summary").join(table)).unwrap();
        assert!(text.starts_with("# config_hash="), "{table}");
    }
}

#[test]
fn shipped_preset_separates_vanilla_and_active() {
    let preset = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/binary.cfg");
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert!(sdebias(&["generate", "--config", preset, "--out", o])
        .status
        .success());
    let mut eo = Vec::new();
    for mode in ["vanilla", "active_sd"] {
        let t = sdebias(&[
            "train", "--config", preset, "--out", o, "--mode", mode, "--repeat", "1",
        ]);
        assert!(t.status.success(), "{}", stderr(&t));
        let summary =
            fs::read_to_string(dir.path().join(format!("runs/{mode}/summary.csv"))).unwrap();
        let mut lines = summary.lines().filter(|l| !l.starts_with('#'));
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "equalodds").unwrap();
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        eo.push(row[col].parse::<f64>().unwrap());
    }
    assert!(eo[0] > eo[1], "vanilla {} vs active {}", eo[0], eo[1]);
}
