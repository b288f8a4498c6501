use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lidarsplat");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn budget_larger_than_cloud_reports_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    assert!(run(&["synth", "--kind", "sphere", "--out", s(&synth)]).status.success());
    let out = run(&["sample", "--cloud", s(&synth.join("cloud.ply")), "--budget", "100000000", "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr.split(|b| *b == b'\n').rfind(|l| !l.is_empty()).unwrap()).unwrap();
    assert_eq!(err["error"]["command"], "sample");
    assert_eq!(err["error"]["kind"], "budget");
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["normals", "--out", s(dir.path())]);
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("\"command\":\"normals\""), "{text}");
}

#[test]
fn effective_config_reingests_to_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(run(&["synth", "--kind", "plane", "--seed", "3", "--out", s(&a)]).status.success());
    let cfg = a.join("effective_config.json");
    assert!(run(&["synth", "--config", s(&cfg)]).status.success());
    let first = std::fs::read(&cfg).unwrap();
    let again = std::fs::read(a.join("effective_config.json")).unwrap();
    assert_eq!(first, again);
    let sample = run(&["sample", "--config", s(&cfg), "--cloud", s(&a.join("cloud.ply")), "--budget", "50", "--out", s(&dir.path().join("b"))]);
    assert!(sample.status.success(), "{}", String::from_utf8_lossy(&sample.stderr));
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("b/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["m"], 50);
}
