//! End-to-end runs of the `rulecascade` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rulecascade")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A world and a mixed 24-episode bench in a fresh directory.
fn fixture() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["generate", "world", "--industry", "technology", "--size", "small", "--seed", "1", "--out", "w.json"]);
    ok(dir.path(), &["generate", "bench", "--world", "w.json", "--episodes", "24", "--seed", "7", "--out", "b.jsonl"]);
    dir
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn report(dir: &Path, rel: &str) -> serde_json::Value {
    serde_json::from_slice(&read(dir, rel)).unwrap()
}

#[test]
fn generate_world_writes_a_world_file() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["generate", "world", "--industry", "technology", "--size", "small", "--seed", "1"]);
    let w = report(dir.path(), "world.json");
    for key in ["profile", "schemas", "seed_records", "rules", "slas", "acls", "priority_matrix", "conflict_pairs"] {
        assert!(w.get(key).is_some(), "world file lacks {key}");
    }
}

#[test]
fn generate_bench_respects_the_requested_count() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["generate", "world", "--industry", "finance", "--seed", "3", "--out", "w.json"]);
    let out = ok(d, &["generate", "bench", "--world", "w.json", "--topology", "linear", "--episodes", "50", "--seed", "7", "--out", "b.jsonl"]);
    let lines = String::from_utf8(read(d, "b.jsonl")).unwrap().lines().count();
    assert!(lines <= 50 && lines > 0);
    let manifest = report(d, "b.manifest.json");
    assert_eq!(manifest["episodes"], lines);
    assert_eq!(manifest["world_ref"], "w.json");
    assert!(String::from_utf8_lossy(&out.stdout).contains("T2"));
    // Loading for evaluation re-validates every episode.
    ok(d, &["eval", "--bench", "b.jsonl", "--predictor", "direct", "--out", "e"]);
}

#[test]
fn runs_are_byte_reproducible() {
    let a = fixture();
    let b = fixture();
    for (dir, out) in [(a.path(), "x"), (b.path(), "x")] {
        ok(dir, &["eval", "--bench", "b.jsonl", "--predictor", "discovery", "--budget", "5", "--k", "3", "--seed", "4", "--out", out]);
    }
    for f in ["w.json", "b.jsonl", "b.manifest.json", "x/predictions.jsonl", "x/contexts.jsonl", "x/report.json", "x/scores.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
}

#[test]
fn inputs_are_not_modified() {
    let dir = fixture();
    let d = dir.path();
    let before = (read(d, "w.json"), read(d, "b.jsonl"));
    ok(d, &["eval", "--bench", "b.jsonl", "--world", "w.json", "--predictor", "oracle", "--k", "2", "--out", "o"]);
    assert_eq!(before, (read(d, "w.json"), read(d, "b.jsonl")));
}

#[test]
fn oracle_scores_one() {
    let dir = fixture();
    ok(dir.path(), &["eval", "--bench", "b.jsonl", "--predictor", "oracle", "--k", "3", "--out", "o"]);
    let r = report(dir.path(), "o/report.json");
    assert_eq!(r["overall"]["iou_strict"]["mean"], 1.0);
    assert_eq!(r["overall"]["iou_tf"]["mean"], 1.0);
}

#[test]
fn zero_budget_and_blocked_rules_degenerate_to_direct() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &["eval", "--bench", "b.jsonl", "--predictor", "direct", "--out", "direct"]);
    ok(d, &["eval", "--bench", "b.jsonl", "--predictor", "discovery", "--budget", "0", "--out", "b0"]);
    ok(d, &["eval", "--bench", "b.jsonl", "--predictor", "discovery", "--acl", "block-rules", "--out", "br"]);
    for other in ["b0", "br"] {
        for f in ["report.json", "scores.csv"] {
            assert_eq!(read(d, &format!("direct/{f}")), read(d, &format!("{other}/{f}")), "{other}/{f}");
        }
    }
    assert_eq!(read(d, "direct/predictions.jsonl"), read(d, "b0/predictions.jsonl"));
}

#[test]
fn compare_writes_a_monotone_sandwich() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &["eval", "--bench", "b.jsonl", "--compare", "--budget", "0,4,15", "--out", "cmp"]);
    let s = report(d, "cmp/sandwich.json");
    let rows = s["rows"].as_array().unwrap();
    let names: Vec<String> = rows
        .iter()
        .map(|r| match r.get("budget") {
            Some(b) => format!("{}@{b}", r["predictor"].as_str().unwrap()),
            None => r["predictor"].as_str().unwrap().to_string(),
        })
        .collect();
    assert_eq!(names, ["direct", "discovery@0", "discovery@4", "discovery@15", "oracle"]);
    let means: Vec<f64> = rows.iter().map(|r| r["iou_strict"].as_f64().unwrap()).collect();
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
    assert_eq!(s["closure_mismatches"].as_array().unwrap().len(), 0);
    assert_eq!(read(d, "cmp/direct/report.json"), read(d, "cmp/discovery-0/report.json"));
}

#[test]
fn malformed_world_exits_one() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("w.json"), "{not json").unwrap();
    let out = run(dir.path(), &["generate", "bench", "--world", "w.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed world file"));
}

#[test]
fn missing_inputs_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), &["generate", "bench", "--world", "nope.json"])), 1);
    assert_eq!(code(&run(dir.path(), &["eval", "--bench", "nope.jsonl"])), 1);
}

#[test]
fn malformed_episode_exits_one() {
    let dir = fixture();
    fs::write(dir.path().join("bad.jsonl"), "{}\n").unwrap();
    let out = run(dir.path(), &["eval", "--bench", "bad.jsonl", "--world", "w.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn validation_rejections_exit_two() {
    let dir = fixture();
    let d = dir.path();
    let density = run(d, &["generate", "world", "--industry", "retail", "--conflict-density", "1.5"]);
    assert_eq!(code(&density), 2);
    assert_eq!(code(&run(d, &["eval", "--bench", "b.jsonl", "--predictor", "oracle", "--budget", "3"])), 2);
    assert_eq!(code(&run(d, &["eval", "--bench", "b.jsonl", "--predictor", "direct", "--acl", "block-rules"])), 2);
    assert_eq!(code(&run(d, &["eval", "--bench", "b.jsonl", "--predictor", "discovery", "--budget", "1,2"])), 2);
    assert_eq!(code(&run(d, &["eval", "--bench", "b.jsonl", "--k", "0"])), 2);
    // Nothing was written by rejected runs.
    assert!(!d.join("eval_out").exists());
}

#[test]
fn tampered_episode_fails_validation_with_report() {
    let dir = fixture();
    let d = dir.path();
    let text = String::from_utf8(read(d, "b.jsonl")).unwrap();
    let mut ep: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let table = ep["rules"][0]["table"].as_str().unwrap().to_string();
    ep["rules"][0]["table"] = serde_json::Value::String(format!("{table}_missing"));
    fs::write(d.join("t.jsonl"), format!("{ep}\n")).unwrap();
    let out = run(d, &["eval", "--bench", "t.jsonl"]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fails validation") && stderr.contains("\"checks\""), "{stderr}");
}

#[test]
fn unknown_world_reference_exits_two() {
    let dir = fixture();
    let d = dir.path();
    fs::copy(d.join("w.json"), d.join("other.json")).unwrap();
    let out = run(d, &["eval", "--bench", "b.jsonl", "--world", "other.json"]);
    assert_eq!(code(&out), 2);
}
