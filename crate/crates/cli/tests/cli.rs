use std::path::Path;
use std::process::{Command, Output};

fn dfr(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfr"))
        .args(["--preset", "smoke", "--out"])
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dfr")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = dfr(root, args);
    assert!(
        out.status.success(),
        "dfr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["gen-world"]);
    ok(root, &["gen-data"]);
    ok(root, &["pretrain"]);
    let tag = ok(root, &["train"]);
    assert!(root.join(tag.trim()).join("projector.ckpt").exists());
    let dfr_rows = ok(root, &["eval", "--method", "dfr"]);
    assert!(dfr_rows.lines().any(|l| l.contains("\tall\t")));
    ok(root, &["eval", "--method", "tokens"]);
    ok(root, &["eval", "--method", "zero_context"]);
    let files = ok(root, &["report"]);
    assert!(files.contains("report.md"));
    let md = std::fs::read_to_string(root.join("report/report.md")).unwrap();
    assert!(md.contains("zero-context"));

    let prov = std::fs::read_to_string(root.join("provenance.jsonl")).unwrap();
    let commands: Vec<String> = prov
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["command"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(commands[..4], ["gen-world", "gen-data", "pretrain", "train"]);
    assert!(!root.join(".lock").exists());

    // A changed input is an integrity failure.
    let ckpt = root.join("backbone/backbone.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(dfr(root, &["eval", "--method", "dfr"]).status.code(), Some(3));
}

#[test]
fn unknown_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfr(dir.path(), &["--train.n_tokns=4", "gen-world"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_tokns"));
}

#[test]
fn overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["--train.n_tokens=8", "config"]);
    assert!(text.contains("train.n_tokens = 8"));
    assert!(text.contains("run.preset = smoke"));
}

#[test]
fn missing_inputs_and_held_locks_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dfr(dir.path(), &["gen-data"]).status.code(), Some(2));
    std::fs::write(dir.path().join(".lock"), "1").unwrap();
    let out = dfr(dir.path(), &["gen-world"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn unknown_eval_method_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-world"]);
    let out = dfr(dir.path(), &["eval", "--method", "bogus"]);
    assert_ne!(out.status.code(), Some(0));
}
