use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avse_core::mixsim::{Dataset, SIR_RANGE_DB};

const TINY: &str = r#"{
  "corpus": {"train_speakers": 4, "dev_speakers": 4, "test_speakers": 4, "utterances_per_speaker": 2},
  "simulate": {"train_pairs": 4, "dev_pairs": 2, "test_pairs": 4},
  "model": {"n_audio_filters": 16, "visual_dim": 8,
            "tcn": {"bottleneck": 8, "hidden": 16, "blocks_per_repeat": 1, "repeats": 1, "kernel": 3}},
  "train": {"schedule": {"max_epochs": 1, "crop_frames": 10, "val_examples": 2}, "step1_max_epochs": 1},
  "eval": {"embed_speakers": 3}
}"#;

fn avse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avse")).current_dir(dir).args(args).output().expect("run avse")
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("no error line in {stderr:?}"))
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failures_report_kind_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    fs::write(d.join("bad.json"), r#"{"simulate": {"sir_range": [0, 30]}}"#).unwrap();

    let out = avse(d, &["train", "--corpus", "nowhere", "--variant", "davse", "--sync-ckpt", "x", "--out", "m.avck"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "CheckpointError");

    let out = avse(d, &["--config", "bad.json", "corpus", "--out", "c"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "ConfigError");

    let out = avse(d, &["simulate", "--corpus", "missing", "--variant", "dsav", "--split", "test", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["exit_code"], 4);

    let out = avse(d, &["simulate", "--corpus", "c", "--variant", "bogus", "--split", "test", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    let out = avse(d, &["--config", "tiny.json", "train", "--corpus", "c", "--variant", "spk", "--step", "2", "--out", "s.avck"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "StateError");

    let out = avse(d, &["train", "--corpus", "c", "--variant", "sync", "--step", "1", "--out", "s.avck"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn commands_chain_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    let cfg = ["--config", "tiny.json"];
    let run = |args: &[&str]| {
        let mut all = cfg.to_vec();
        all.extend_from_slice(args);
        let out = avse(d, &all);
        assert_ok(&out);
        out
    };
    run(&["corpus", "--out", "corpus"]);
    run(&["corpus", "--out", "corpus2"]);
    assert_eq!(fs::read(d.join("corpus/manifest.jsonl")).unwrap(), fs::read(d.join("corpus2/manifest.jsonl")).unwrap());
    for (v, split) in [("dsav", "train"), ("dsav", "dev"), ("dsav", "test"), ("dssv", "train"), ("dssv", "dev")] {
        run(&["simulate", "--corpus", "corpus", "--variant", v, "--split", split, "--out", &format!("data/{v}_{split}.jsonl")]);
    }
    run(&["simulate", "--corpus", "corpus", "--variant", "dsav", "--split", "test", "--pairs", "30", "--out", "sir.jsonl"]);
    let sir = Dataset::load(&d.join("sir.jsonl")).unwrap();
    assert_eq!(sir.len(), 30);
    assert!(sir.examples.iter().all(|e| (SIR_RANGE_DB.0..=SIR_RANGE_DB.1).contains(&e.sir_db)));
    run(&["simulate", "--corpus", "corpus", "--variant", "dsav", "--split", "test", "--pairs", "30", "--out", "sir2.jsonl"]);
    assert_eq!(fs::read(d.join("sir.jsonl")).unwrap(), fs::read(d.join("sir2.jsonl")).unwrap());

    run(&["train", "--corpus", "corpus", "--variant", "baseline", "--train", "data/dsav_train.jsonl", "--dev", "data/dsav_dev.jsonl", "--out", "ck/baseline.avck"]);
    assert!(d.join("ck/baseline.log.jsonl").exists());
    run(&["train", "--corpus", "corpus", "--variant", "spk", "--step", "1", "--out", "ck/spk1.avck"]);
    let out = avse(d, &["--config", "tiny.json", "train", "--corpus", "corpus", "--variant", "spk", "--step", "1", "--init", "ck/spk1.avck", "--out", "x.avck"]);
    assert_eq!(out.status.code(), Some(3));
    run(&["train", "--corpus", "corpus", "--variant", "spk", "--step", "2", "--init", "ck/spk1.avck", "--train", "data/dssv_train.jsonl", "--dev", "data/dssv_dev.jsonl", "--out", "ck/spk.avck"]);
    run(&["train", "--corpus", "corpus", "--variant", "sync", "--out", "ck/sync.avck"]);
    run(&["train", "--corpus", "corpus", "--variant", "davse", "--spk-ckpt", "ck/spk.avck", "--sync-ckpt", "ck/sync.avck", "--out", "ck/davse.avck"]);

    let eval = ["evaluate", "--corpus", "corpus", "--ckpt", "ck/baseline.avck", "--ckpt", "ck/davse.avck", "--dataset", "data/dsav_test.jsonl", "--mixture"];
    let mut a = eval.to_vec();
    a.extend(["--out", "r1/report.json"]);
    let out = run(&a);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("mixture") && table.contains("davse") && table.contains("SI-SNRi"), "{table}");
    let mut b = eval.to_vec();
    b.extend(["--out", "r2/report.json", "--workers", "2"]);
    run(&b);
    assert_eq!(fs::read(d.join("r1/report.json")).unwrap(), fs::read(d.join("r2/report.json")).unwrap());
    assert!(d.join("r1/report.txt").exists());

    run(&["embed", "--corpus", "corpus", "--ckpt", "ck/davse.avck", "--out", "emb"]);
    for f in ["davse.avt", "davse.json", "davse_frames.csv", "davse_frames.svg", "davse_utts.csv", "davse_summary.json"] {
        assert!(d.join("emb").join(f).exists(), "{f}");
    }
    let out = avse(d, &["--config", "tiny.json", "embed", "--corpus", "corpus", "--ckpt", "ck/davse.avck", "--speakers", "9", "--out", "emb"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_pesq_scorer_is_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    let cfg = ["--config", "tiny.json"];
    let run = |args: &[&str]| {
        let mut all = cfg.to_vec();
        all.extend_from_slice(args);
        avse(d, &all)
    };
    assert_ok(&run(&["corpus", "--out", "corpus"]));
    assert_ok(&run(&["simulate", "--corpus", "corpus", "--variant", "dsav", "--split", "test", "--out", "t.jsonl"]));
    assert_ok(&run(&["train", "--corpus", "corpus", "--variant", "sync", "--out", "sync.avck"]));
    let out = run(&["evaluate", "--corpus", "corpus", "--ckpt", "sync.avck", "--dataset", "t.jsonl", "--pesq-cmd", "/nonexistent/pesq", "--out", "r.json"]);
    assert_ok(&out);
    assert_eq!(error_line(&out)["error"], "PesqUnavailable");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["cells"][0]["pesq_failures"], 4);
}

#[test]
fn report_runs_the_whole_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    let out = avse(d, &["--config", "tiny.json", "report", "--seeds", "0", "--out", "run"]);
    assert_ok(&out);
    let summary = fs::read_to_string(d.join("run/summary.txt")).unwrap();
    for row in ["mixture", "baseline (face)", "spk (face)", "spk (mouth)", "sync (face)", "davse (face)"] {
        assert!(summary.contains(row), "{row} missing from\n{summary}");
    }
    for f in ["seed0/report.json", "seed0/report.txt", "seed0/ckpt/davse.avck", "seed0/logs/spk.jsonl", "seed0/embed/davse_frames.svg", "data/dssv_test.jsonl", "corpus/manifest.jsonl"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
}
