use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn emkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emkd"))
        .args(args)
        .env("EMKD_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = emkd(args);
    assert!(
        out.status.success(),
        "{args:?}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Six users who each see six items once; user 9 is too short to survive.
fn write_tiny_tsv(dir: &Path) -> (PathBuf, PathBuf) {
    let mut log = String::new();
    for u in 0..6 {
        for t in 0..6 {
            log.push_str(&format!("{u}\t{}\t{}\n", (u + t) % 6, 100 * u + t));
        }
    }
    log.push_str("9\t0\t5\n9\t1\t6\n");
    let mut attrs = String::new();
    for i in 0..6 {
        attrs.push_str(&format!("{i}\tg{},h{}\n", i % 2, i % 3));
    }
    let (lp, ap) = (dir.join("log.tsv"), dir.join("attrs.tsv"));
    fs::write(&lp, log).unwrap();
    fs::write(&ap, attrs).unwrap();
    (lp, ap)
}

const SMALL_SYNTH: &[&str] = &[
    "--format",
    "synth",
    "--synth-users",
    "60",
    "--epochs",
    "2",
    "--hidden-dim",
    "8",
    "--n-networks",
    "2",
    "--max-len",
    "10",
    "--batch-size",
    "32",
    "--eval-every",
    "1",
];

/// Small synthetic settings, with flags in `extra` taking precedence.
fn with_small<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for pair in SMALL_SYNTH.chunks(2) {
        if !extra.contains(&pair[0]) {
            args.extend_from_slice(pair);
        }
    }
    args.extend_from_slice(extra);
    args
}

fn train(out: &Path, extra: &[&str]) -> String {
    ok(&with_small(vec!["train", "--out", s(out)], extra))
}

fn metric_lines(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn preprocess_reports_stats_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (log, attrs) = write_tiny_tsv(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let stdout = ok(&[
            "preprocess", "--format", "tsv", "--input", s(&log), "--attributes", s(&attrs), "--out", s(&out),
        ]);
        (stdout, out)
    };
    let (a, dir_a) = run("a");
    let (b, dir_b) = run("b");
    assert!(a.contains("users") && a.contains("36"), "{a}");
    let fp = |text: &str| text.lines().find(|l| l.starts_with("fingerprint")).unwrap().to_string();
    assert_eq!(fp(&a), fp(&b));
    assert_eq!(
        fs::read(dir_a.join("dataset.json")).unwrap(),
        fs::read(dir_b.join("dataset.json")).unwrap()
    );
    let ds: Value = serde_json::from_slice(&fs::read(dir_a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(ds["dataset"]["stats"]["users"], 6);
    assert_eq!(ds["dataset"]["stats"]["items"], 6);
    assert_eq!(ds["dataset"]["stats"]["actions"], 36);
    assert_eq!(ds["dataset"]["stats"]["attributes"], 5);
}

#[test]
fn train_writes_every_artifact_and_eval_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let stdout = train(&out, &[]);
    assert!(stdout.contains("NDCG@10"));
    for f in ["manifest.json", "metrics.jsonl", "last.ckpt", "best.ckpt", "report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let lines = metric_lines(&out);
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["validation"]["ndcg10"].is_number());

    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["model"]["max_len"], 10);
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 2);
    assert!(manifest["dataset_fingerprint"].is_string());

    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let json = tmp.path().join("eval.json");
    ok(&["eval", "--checkpoint", s(&out.join("best.ckpt")), "--out", s(&json)]);
    let again: Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(again, report["test"]);
}

#[test]
fn single_and_independent_flags_shape_the_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let single = tmp.path().join("single");
    train(&single, &["--n-networks", "1", "--no-icl", "--no-ccl", "--no-kd", "--no-ap"]);
    for l in metric_lines(&single) {
        for k in ["ap", "icl", "ccl", "kd"] {
            assert_eq!(l[k], 0.0, "{k}");
        }
        assert_eq!(l["total"], l["mip"]);
    }

    let indep = tmp.path().join("indep");
    train(&indep, &["--independent-training"]);
    for l in metric_lines(&indep) {
        assert!(l["ap"].as_f64().unwrap() > 0.0);
        for k in ["icl", "ccl", "kd"] {
            assert_eq!(l[k], 0.0, "{k}");
        }
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let straight = tmp.path().join("straight");
    train(&straight, &["--epochs", "3"]);
    let first = tmp.path().join("first");
    train(&first, &[]);
    let resumed = tmp.path().join("resumed");
    train(&resumed, &["--epochs", "3", "--resume", s(&first.join("last.ckpt"))]);
    assert_eq!(
        fs::read(straight.join("metrics.jsonl")).unwrap(),
        fs::read(resumed.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(straight.join("report.json")).unwrap(),
        fs::read(resumed.join("report.json")).unwrap()
    );

    // weights-only files cannot be resumed
    let out = emkd(&["train", "--out", s(&tmp.path().join("x")), "--resume", s(&first.join("best.ckpt"))]);
    assert!(!out.status.success());
}

#[test]
fn eval_refuses_a_different_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    train(&run, &["--epochs", "1"]);
    let other = tmp.path().join("other");
    ok(&["preprocess", "--format", "synth", "--synth-users", "61", "--out", s(&other)]);
    let out = emkd(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--dataset",
        s(&other.join("dataset.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn invalid_settings_list_every_problem_and_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let res = emkd(&["train", "--out", s(&out), "--format", "synth", "--tau", "0", "--lambda=-1"]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("tau") && err.contains("lambda"), "{err}");
    assert!(!out.exists());
}

#[test]
fn failed_runs_leave_no_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let res = emkd(&["train", "--out", s(&out), "--dataset", "/nonexistent/d.json"]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let good = emkd(&["gradcheck", "--seeds", "1"]);
    assert!(good.status.success());
    let bad = emkd(&["gradcheck", "--seeds", "1", "--corrupt", "kd"]);
    assert_eq!(bad.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("loss:kd") && l.contains("FAIL")));
    assert_eq!(stdout.matches("FAIL").count(), 1);
}

#[test]
fn ablation_variants_get_their_own_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("grid");
    let table = ok(&with_small(
        vec!["ablate", "--out", s(&out), "--variants", "full,no-kd,single", "--seeds", "1"],
        &[],
    ));
    assert!(table.contains("no-kd") && table.contains("single"));
    let grid: Value = serde_json::from_slice(&fs::read(out.join("grid.json")).unwrap()).unwrap();
    assert_eq!(grid["variants"].as_array().unwrap().len(), 3);

    let mut manifests = Vec::new();
    for v in ["full", "no-kd", "single"] {
        let dirs: Vec<_> = fs::read_dir(out.join(v)).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(dirs.len(), 1);
        let m: Value = serde_json::from_slice(&fs::read(dirs[0].join("manifest.json")).unwrap()).unwrap();
        manifests.push(m["config"].clone());
    }
    assert_ne!(manifests[0], manifests[1]);
    assert_ne!(manifests[1], manifests[2]);
    assert_eq!(manifests[1]["train"]["ablation"]["no_kd"], true);
    assert_eq!(manifests[2]["model"]["n_networks"], 1);
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let res = emkd(&["ablate", "--out", s(&tmp.path().join("g")), "--variants", "bogus", "--format", "synth"]);
    assert_eq!(res.status.code(), Some(1));
}
