use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rsmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsmamba"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rsmamba(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--blocks", "1", "--hidden", "8", "--state", "2", "--image", "8", "--kernel", "4", "--stride", "2",
    "--classes", "3", "--epochs", "2", "--batch-size", "4", "--synth-per-class", "4",
    "--synth-val-per-class", "2", "--noise", "0.2",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

#[test]
fn params_prints_preset_count() {
    assert_eq!(ok(&["params", "--preset", "base", "--classes", "30"]).trim(), "6381030");
    assert_eq!(ok(&["params", "--preset", "large", "--classes", "30"]).trim(), "16252554");
}

#[test]
fn unknown_command_or_flag_prints_usage() {
    for args in [&["frobnicate"][..], &["params", "--colour", "red"]] {
        let out = rsmamba(args);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn bad_values_fail_cleanly() {
    let out = rsmamba(&["params", "--pe", "sinusoidal"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("positional encoding"));
}

#[test]
fn train_eval_predict_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let log = ok(&with(&["train", "--out", run_s], TINY));
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    for f in ["model.ckpt", "manifest.kv", "log.txt", "log.json", "metrics.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let ckpt = run.join("model.ckpt");
    let report = ok(&with(&["eval", "--checkpoint", ckpt.to_str().unwrap()], TINY));
    assert!(report.contains("macro_f1 = "));
    assert!(report.contains("confusion.2 = "));

    // the manifest alone regenerates the run
    let again = dir.path().join("again");
    ok(&[
        "train",
        "--config",
        run.join("manifest.kv").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(run.join("log.txt")).unwrap(),
        fs::read(again.join("log.txt")).unwrap()
    );
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("model.ckpt")).unwrap());

    let data = dir.path().join("data");
    ok(&with(&["gen-synth", "--out", data.to_str().unwrap()], TINY));
    let sample = data.join("train").join("sample_000001.rstn");
    let pred = ok(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        sample.to_str().unwrap(),
    ]);
    let class: usize = pred.split_whitespace().last().unwrap().parse().unwrap();
    assert!(class < 3);
}

#[test]
fn trains_from_raw_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&with(&["gen-synth", "--out", data.to_str().unwrap()], TINY));
    assert!(Path::new(&data.join("train").join("index.txt")).exists());
    let out = dir.path().join("raw");
    let train_index = data.join("train").join("index.txt");
    let val_index = data.join("val").join("index.txt");
    let args = [
        "train", "--out", out.to_str().unwrap(), "--blocks", "1", "--hidden", "8", "--state", "2", "--image", "8",
        "--kernel", "4", "--stride", "2", "--classes", "3", "--epochs", "1", "--batch-size", "4", "--data", "raw",
        "--train-index", train_index.to_str().unwrap(), "--val-index", val_index.to_str().unwrap(),
    ];
    let log = ok(&args);
    assert!(log.contains("val_f1="));
}

#[test]
fn ablate_is_deterministic() {
    let args = [
        "ablate", "--suite", "pe", "--seed", "7", "--seeds", "1", "--epochs", "1", "--blocks", "1",
        "--hidden", "8", "--classes", "3", "--image", "8", "--kernel", "4", "--stride", "4", "--synth-per-class", "3",
        "--synth-val-per-class", "2",
    ];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let rows: Vec<&str> = a.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("| None"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.kv");
    fs::write(&cfg, "classes = 30\nhidden = 32\nblocks = 2\n").unwrap();
    let small = ok(&["params", "--config", cfg.to_str().unwrap()]);
    let smaller = ok(&["params", "--config", cfg.to_str().unwrap(), "--blocks", "1"]);
    let a: usize = small.trim().parse().unwrap();
    let b: usize = smaller.trim().parse().unwrap();
    assert!(b < a);

    fs::write(&cfg, "command = train\n").unwrap();
    assert!(!rsmamba(&["params", "--config", cfg.to_str().unwrap()]).status.success());
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    assert!(out.contains("0 failed"), "{out}");
}
