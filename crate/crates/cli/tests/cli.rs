use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tsnode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsnode")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_manifest(dir: &Path, train: &str, extra: &str) -> String {
    let path = dir.join("manifest.json");
    let text = format!(
        r#"{{"system": "lk", "profile": "desk", "train": {train}, "variants": ["baseline", "tsnode"]{extra}}}"#
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{"iterations": 30, "warmup": 10, "eval_every": 10, "hidden": [8], "label_batch": 8, "pseudo_batch": 8}"#;

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(tsnode(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(tsnode(&["train"]).status.code(), Some(1));
    assert_eq!(tsnode(&["train", "--manifest", "/nonexistent/manifest.json"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let m = write_manifest(tmp.path(), SMALL, "");
    assert_eq!(tsnode(&["train", "--manifest", &m, "--variant", "bogus"]).status.code(), Some(1));
    assert_eq!(tsnode(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_passes_and_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = tsnode(&["verify", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 9);
}

#[test]
fn diverging_training_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let m = write_manifest(tmp.path(), r#"{"iterations": 30, "warmup": 10, "eval_every": 10, "hidden": [8], "eta_t": 1e9}"#, "");
    let o = tsnode(&["train", "--manifest", &m, "--variant", "baseline", "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn empty_sweep_is_an_explicit_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let m = write_manifest(tmp.path(), SMALL, "");
    let out = tmp.path().join("out");
    let o = tsnode(&["sweep-sigma", "--manifest", &m, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("nothing to do"));
    assert!(!out.join("sigma_sweep.csv").exists());
}

#[test]
fn rerunning_train_resumes_from_finished_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let m = write_manifest(tmp.path(), SMALL, r#", "seeds": [3]"#);
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    assert!(tsnode(&["train", "--manifest", &m, "--out", o]).status.success());
    let first = fs::read(out.join("runs/tsnode_seed3/run.json")).unwrap();
    assert!(tsnode(&["train", "--manifest", &m, "--out", o]).status.success());
    assert_eq!(fs::read(out.join("runs/tsnode_seed3/run.json")).unwrap(), first);

    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("tsnode,1,")));
}

#[test]
fn seed_and_variant_flags_select_one_run() {
    let tmp = tempfile::tempdir().unwrap();
    let m = write_manifest(tmp.path(), SMALL, r#", "seeds": [0, 1]"#);
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    assert!(tsnode(&["train", "--manifest", &m, "--out", o, "--variant", "no_feedback", "--seed", "4"]).status.success());
    let runs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(runs, vec!["no_feedback_seed4"]);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("runs/no_feedback_seed4/run.json")).unwrap()).unwrap();
    assert_eq!(record["model"], "student");
}
