use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sparsenav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsenav"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sparsenav(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn removed_units(audit: &Value) -> usize {
    audit["plan"]["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["removed"].as_array().unwrap().len())
        .sum()
}

#[test]
fn ratio_out_of_range_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparsenav(&[
        "prune",
        "--model",
        "missing.bin",
        "--out",
        s(&dir.path().join("p.bin")),
        "--ratio",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(0, 1)"), "{err}");
}

#[test]
fn zero_window_rejected() {
    let out = sparsenav(&["navigate", "--frames", ".", "--window", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = sparsenav(&["profile", "--model", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("nope.bin"), "{err}");
}

#[test]
fn methods_share_removal_counts_under_one_profile() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("m.bin");
    let profile = d.join("profile.json");
    ok(&["build", "--out", s(&model), "--seed", "3"]);
    ok(&["profile", "--model", s(&model), "--reps", "3", "--warmup", "1", "--out", s(&profile)]);
    let mut counts = Vec::new();
    for method in ["disha", "random"] {
        let out = d.join(format!("{method}.bin"));
        ok(&[
            "prune",
            "--model",
            s(&model),
            "--out",
            s(&out),
            "--method",
            method,
            "--ratio",
            "0.4",
            "--calib",
            "2",
            "--profile",
            s(&profile),
        ]);
        let audit = read_json(&d.join(format!("{method}.bin.plan.json")));
        assert_eq!(audit["method"], method);
        counts.push((removed_units(&audit), audit["timing"]["allocation"].clone()));
    }
    let blocks = counts[0].1["blocks"].as_array().unwrap().len();
    assert_eq!(counts[0].1, counts[1].1, "allocations differ");
    assert!(counts[0].0.abs_diff(counts[1].0) <= blocks, "{} vs {}", counts[0].0, counts[1].0);
}

#[test]
fn drift_left_walk_ends_left() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("walk");
    let log = dir.path().join("nav.tsv");
    ok(&["scenegen", "--out", s(&frames), "--seed", "4", "--count", "12", "--drift", "left"]);
    let stdout = ok(&["navigate", "--frames", s(&frames), "--out", s(&log)]);
    let lines: Vec<_> = stdout.lines().collect();
    assert_eq!(lines.len(), 12);
    let last: Vec<_> = lines.last().unwrap().split('\t').collect();
    assert_eq!(last[2], "left", "{stdout}");
    assert_eq!(std::fs::read_to_string(&log).unwrap(), stdout);
}

#[test]
fn outputs_are_deterministic_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("m.bin");
    ok(&["build", "--out", s(&model), "--seed", "9", "--tiny"]);
    let again = d.join("m2.bin");
    ok(&["build", "--out", s(&again), "--seed", "9", "--tiny"]);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());

    for run in ["a", "b"] {
        ok(&["scenegen", "--out", s(&d.join(run)), "--seed", "5", "--count", "3"]);
    }
    for entry in std::fs::read_dir(d.join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(d.join("a").join(&name)).unwrap(),
            std::fs::read(d.join("b").join(&name)).unwrap(),
            "{name:?}"
        );
    }

    let profile = d.join("profile.json");
    ok(&["profile", "--model", s(&model), "--reps", "2", "--warmup", "0", "--out", s(&profile)]);
    let mut plans = Vec::new();
    for run in ["p1", "p2"] {
        let out = d.join(format!("{run}.bin"));
        ok(&[
            "prune",
            "--model",
            s(&model),
            "--out",
            s(&out),
            "--method",
            "random",
            "--seed",
            "2",
            "--profile",
            s(&profile),
        ]);
        plans.push((std::fs::read(&out).unwrap(), read_json(&d.join(format!("{run}.bin.plan.json")))));
    }
    assert_eq!(plans[0].0, plans[1].0);
    assert_eq!(plans[0].1["plan"], plans[1].1["plan"]);

    let first = ok(&["navigate", "--frames", s(&d.join("a")), "--model", s(&model)]);
    let second = ok(&["navigate", "--frames", s(&d.join("a")), "--model", s(&model)]);
    assert_eq!(first, second);
    assert_eq!(first.lines().count(), 3);
}

#[test]
fn eval_prints_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.bin");
    let report = dir.path().join("report.json");
    ok(&["build", "--out", s(&model), "--tiny"]);
    let table = ok(&[
        "eval",
        "--model",
        s(&model),
        "--scenes",
        "3",
        "--calib",
        "2",
        "--reps",
        "2",
        "--warmup",
        "0",
        "--out",
        s(&report),
    ]);
    assert!(table.contains("Latency (%)") && table.contains("disha") && table.contains("random"), "{table}");
    let doc = read_json(&report);
    assert_eq!(doc["scenes"], 3);
    assert_eq!(doc["quality"].as_array().unwrap().len(), 3);
}
