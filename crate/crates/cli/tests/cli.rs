use std::path::{Path, PathBuf};
use std::process::Command;

use kite_core::training::sha256_hex;

fn kite() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kite"))
}

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = kite().args(args).arg("-q").output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> serde_json::Value {
    let (code, stdout, stderr) = run(args);
    assert_eq!(code, 0, "{args:?}: {stderr}");
    serde_json::from_str(stdout.trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fixture, vocabulary and splits under `dir`; a small model for speed.
fn prepared(dir: &Path) -> Vec<String> {
    let config = desk();
    let fx = dir.join("fx");
    ok(&["synth", "--config", s(&config), "--out-dir", s(&fx)]);
    ok(&[
        "vocab",
        "--corpus",
        s(&fx.join("corpus.txt")),
        "--drugs",
        s(&fx.join("drugs.tsv")),
        "--out-dir",
        s(&dir.join("vocab")),
    ]);
    let data = [
        "--drugs".to_string(),
        s(&fx.join("drugs.tsv")).into(),
        "--events".into(),
        s(&fx.join("events.tsv")).into(),
        "--labels".into(),
        s(&fx.join("labels.txt")).into(),
    ];
    let mut split = vec!["split".to_string(), "--config".into(), s(&config).into()];
    split.extend(data.iter().cloned());
    split.extend(["--out-dir".into(), s(&dir.join("split")).into()]);
    ok(&split.iter().map(String::as_str).collect::<Vec<_>>());
    let mut common = data.to_vec();
    common.extend([
        "--splits".into(),
        s(&dir.join("split/splits.json")).into(),
        "--config".into(),
        s(&config).into(),
        "--set".into(),
        "model.d_model=16".into(),
        "--set".into(),
        "model.n_heads=2".into(),
        "--set".into(),
        "model.n_layers=1".into(),
    ]);
    common
}

fn with<'a>(base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = extra.to_vec();
    v.extend(base.iter().map(String::as_str));
    v
}

#[test]
fn eval_twice_gives_identical_reports_and_inputs_are_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let common = prepared(dir.path());
    let vocab = dir.path().join("vocab/vocab.txt");
    let train = dir.path().join("train");
    ok(&with(
        &common,
        &["train", "--vocab", s(&vocab), "--fold", "0", "--set", "finetune.epochs=2", "--out-dir", s(&train)],
    ));
    let inputs: Vec<PathBuf> = ["fx/drugs.tsv", "fx/events.tsv", "split/splits.json", "train/best.ckpt"]
        .iter()
        .map(|p| dir.path().join(p))
        .collect();
    let before: Vec<String> = inputs.iter().map(|p| sha256_hex(&std::fs::read(p).unwrap())).collect();
    let ck = train.join("best.ckpt");
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("eval{k}"));
        ok(&with(&common, &["eval", "--checkpoint", s(&ck), "--split", "u1", "--out-dir", s(&out)]));
        reports.push(std::fs::read(out.join("metrics.json")).unwrap());
        for f in ["roc.csv", "pr.csv", "manifest.json", "config.toml"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
    assert_eq!(reports[0], reports[1]);
    let after: Vec<String> = inputs.iter().map(|p| sha256_hex(&std::fs::read(p).unwrap())).collect();
    assert_eq!(before, after);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval0/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
    assert_eq!(manifest["inputs"][s(&ck)], before[3]);
    assert!(manifest["outputs"]["metrics.json"].is_string());
}

#[test]
fn sts_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let common = prepared(dir.path());
    let vocab = dir.path().join("vocab/vocab.txt");
    let out = dir.path().join("sts");
    let summary = ok(&with(
        &common,
        &["sts", "--vocab", s(&vocab), "--set", "finetune.epochs=1", "--out-dir", s(&out)],
    ));
    let csv = std::fs::read_to_string(out.join("sts.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len() as u64, summary["steps"].as_u64().unwrap());
    assert!(rows[0].starts_with("0,1,"));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, _, err) = run(&["synth", "--set", "model.nope=1", "--out-dir", s(&out)]);
    assert_eq!(code, 2);
    assert!(err.starts_with("kite: error[config]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let (code, _, _) = run(&["synth", "--threads", "0", "--out-dir", s(&out)]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, 2);

    let bad = dir.path().join("corpus.txt");
    std::fs::write(&bad, "CC\nC1CC\n").unwrap();
    let (code, _, err) = run(&["vocab", "--corpus", s(&bad), "--out-dir", s(&out)]);
    assert_eq!(code, 3, "{err}");
    assert!(err.starts_with("kite: error[data]: "), "{err}");

    let missing = dir.path().join("absent.txt");
    let (code, _, _) = run(&["vocab", "--corpus", s(&missing), "--out-dir", s(&out)]);
    assert_eq!(code, 3);

    // A learning rate this large overflows the masked-token loss.
    let fx = dir.path().join("fx");
    ok(&["synth", "--set", "fixture.corpus=40", "--out-dir", s(&fx)]);
    ok(&["vocab", "--corpus", s(&fx.join("corpus.txt")), "--out-dir", s(&fx.join("v"))]);
    let (code, _, err) = run(&[
        "pretrain",
        "--corpus",
        s(&fx.join("corpus.txt")),
        "--vocab",
        s(&fx.join("v/vocab.txt")),
        "--config",
        s(&desk()),
        "--set",
        "pretrain.lr=1e30",
        "--set",
        "pretrain.epochs=3",
        "--out-dir",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(code, 4, "{err}");
    assert!(err.starts_with("kite: error[numeric]: "), "{err}");
}

#[test]
fn outputs_never_replace_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("vocab.txt");
    std::fs::write(&corpus, "CCO\nc1ccccc1\n").unwrap();
    let (code, _, err) = run(&["vocab", "--corpus", s(&corpus), "--out-dir", s(dir.path())]);
    assert_eq!(code, 2, "{err}");
    assert_eq!(std::fs::read_to_string(&corpus).unwrap(), "CCO\nc1ccccc1\n");
}

#[test]
fn effective_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--seed", "7", "--set", "fixture.drugs=12", "--set", "fixture.events=30", "--out-dir", s(dir.path())]);
    let echoed = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    let table: toml::Table = echoed.parse().unwrap();
    assert_eq!(table["seed"].as_integer(), Some(7));
    assert_eq!(table["fixture"]["drugs"].as_integer(), Some(12));
    let again = dir.path().join("again");
    ok(&["synth", "--config", s(&dir.path().join("config.toml")), "--out-dir", s(&again)]);
    for f in ["drugs.tsv", "events.tsv", "kg.tsv", "corpus.txt"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }
}
