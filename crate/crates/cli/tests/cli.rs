use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nesy_core::evaluation::RunResult;
use nesy_core::pipeline::Explanation;
use serde_json::Value;

fn nesy(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nesy"))
        .args(args)
        .current_dir(dir)
        .env_remove("NESY_OUT")
        .output()
        .expect("spawn nesy")
}

fn ok(out: &Output) -> &[u8] {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    &out.stdout
}

const SHORT: &str = r#"{"train": {"epochs": 24, "patience": 6}}"#;

#[test]
fn train_extract_eval_explain_label() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, SHORT).unwrap();
    let cfg = cfg.to_str().unwrap();

    ok(&nesy(
        &["train", "--config", cfg, "--strategy", "ts3", "--synthetic", "c3", "--out", "run"],
        tmp.path(),
    ));
    let run = tmp.path().join("run");
    for f in ["config.json", "model.json", "p_matrix.csv", "thresholds.csv", "train_log.jsonl", "split.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    ok(&nesy(&["extract", "--out", "run"], tmp.path()));
    let rules_first = fs::read(run.join("rules.lp")).unwrap();
    let table_first = fs::read(run.join("table.csv")).unwrap();
    ok(&nesy(&["extract", "--out", "run"], tmp.path()));
    assert_eq!(fs::read(run.join("rules.lp")).unwrap(), rules_first);
    assert_eq!(fs::read(run.join("table.csv")).unwrap(), table_first);

    let stdout = ok(&nesy(&["eval", "--out", "run"], tmp.path())).to_vec();
    let report: Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    for key in ["nesy_accuracy", "fidelity", "ruleset_size", "seed"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let printed: RunResult = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(printed.seed, 0);

    let split: Value = serde_json::from_slice(&fs::read(run.join("split.json")).unwrap()).unwrap();
    let test_id = split
        .as_object()
        .unwrap()
        .iter()
        .find(|(_, v)| v.as_str() == Some("test"))
        .map(|(k, _)| k.clone())
        .unwrap();
    let e: Explanation = serde_json::from_slice(ok(&nesy(&["explain", "--out", "run", "--json", &test_id], tmp.path()))).unwrap();
    assert_eq!(e.image_id, test_id);
    if let Some(j) = &e.justification {
        assert_eq!(j.class(), e.class.as_deref());
        assert!(j.depth() <= 4, "depth {}", j.depth());
    }
    let text = String::from_utf8(ok(&nesy(&["explain", "--out", "run", &test_id], tmp.path())).to_vec()).unwrap();
    assert!(text.starts_with(&test_id));

    ok(&nesy(&["label", "--out", "run"], tmp.path()));
    assert!(run.join("labels.json").exists());
    assert!(run.join("rules.labelled.lp").exists());
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochs": 6, "patience": 2}}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        ok(&nesy(
            &["train", "--config", cfg, "--strategy", "ts1", "--synthetic", "c3", "--seed", "4", "--out", out],
            tmp.path(),
        ));
    }
    for f in ["model.json", "p_matrix.csv", "thresholds.csv", "train_log.jsonl", "config.json"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn env_var_sets_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochs": 3, "patience": 1}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nesy"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--strategy", "ts5", "--synthetic", "c3"])
        .current_dir(tmp.path())
        .env("NESY_OUT", "from-env")
        .output()
        .unwrap();
    ok(&out);
    let dir = tmp.path().join("from-env");
    assert!(dir.join("model.json").exists());
    assert!(!dir.join("thresholds.csv").exists());
}

#[test]
fn unknown_config_keys_are_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"synthetic": "c3", "learning_rat": 1, "train": {"bogus": 0}}"#).unwrap();
    let out = nesy(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let rec: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["error"], "config");
    let msg = rec["message"].as_str().unwrap();
    assert!(msg.contains("learning_rat") && msg.contains("train.bogus"), "{msg}");
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nesy(&["eval", "--out", "nowhere"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let rec: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["error"], "missing_artifact");
}

#[test]
fn check_claims_on_bundled_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nesy(&["report", "--check-claims", "--out", "claims.json"], tmp.path());
    let v: Value = serde_json::from_slice(ok(&out)).unwrap();
    let entries = v["claims"]["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    assert!(entries.iter().all(|e| e["pass"] == true));
    assert!(tmp.path().join("claims.json").exists());
}

#[test]
fn report_aggregates_run_files() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    fs::create_dir(&runs).unwrap();
    for (seed, acc) in [(0u64, 80.0), (1, 90.0)] {
        let r = RunResult {
            strategy: nesy_core::training::Strategy::Ts3,
            dataset: "d".into(),
            seed,
            cnn_accuracy: 90.0,
            nesy_accuracy: acc,
            fidelity: 88.0,
            ruleset_size: 10,
            abstention_rate: 0.0,
        };
        r.write_json(&runs.join(format!("ts3-d-seed{seed}.json"))).unwrap();
    }
    let v: Value = serde_json::from_slice(ok(&nesy(&["report", "runs"], tmp.path()))).unwrap();
    assert_eq!(v["tables"][0]["ms"]["nesy_accuracy"], 85);
    assert_eq!(v["tables"][0]["cells"][0]["runs"], 2);
}
