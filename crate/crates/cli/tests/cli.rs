use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn occplan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occplan"))
        .args(args)
        .current_dir(cwd)
        .env_remove("OCCPLAN_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_map(dir: &Path) {
    let o = occplan(
        &["train-map", "--preset", "two-rectangle", "--out", "map.json", "--features", "300", "--epochs", "1"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_map(d);

    // Missing input file: I/O error.
    let o = occplan(&["plan", "--map", "nope.json", "--start", "1,5", "--goal", "9,5"], d);
    assert_eq!(code(&o), 2);
    // Corrupt map file: unreadable input.
    fs::write(d.join("bad.json"), "{ not json").unwrap();
    let o = occplan(&["rrt", "--map", "bad.json", "--start", "1,5", "--goal", "9,5"], d);
    assert_eq!(code(&o), 2);
    // Invalid configuration values and usage errors.
    let o = occplan(&["plan", "--map", "map.json", "--start", "1,5", "--goal", "9,5", "--power", "0.4"], d);
    assert_eq!(code(&o), 3);
    let o = occplan(&["plan", "--map", "map.json", "--start", "1", "--goal", "9,5"], d);
    assert_eq!(code(&o), 3);
    let o = occplan(&["plan", "--bogus"], d);
    assert_eq!(code(&o), 3);
    fs::write(d.join("cfg.json"), r#"{"planner": {"batch": "many"}}"#).unwrap();
    let o = occplan(&["plan", "--map", "map.json", "--start", "1,5", "--goal", "9,5", "--config", "cfg.json"], d);
    assert_eq!(code(&o), 3);
    // Goal inside an obstacle: infeasible.
    let o = occplan(&["plan", "--map", "map.json", "--start", "1,5", "--goal", "3.2,6.5"], d);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    // Too few samples to reach the goal: infeasible.
    let o = occplan(&["rrt", "--map", "map.json", "--start", "1,5", "--goal", "9,5", "--max-samples", "1"], d);
    assert_eq!(code(&o), 1);
    // Help is not an error.
    assert_eq!(code(&occplan(&["--help"], d)), 0);
}

#[test]
fn flags_override_config_file_and_env_sets_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_map(d);
    fs::write(d.join("cfg.json"), r#"{"planner": {"max_iters": 7, "batch": 5, "seed": 2}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_occplan"))
        .args(["plan", "--map", "map.json", "--start", "1,5", "--goal", "9,5", "--config", "cfg.json", "--batch", "4"])
        .current_dir(d)
        .env("OCCPLAN_OUTPUT_DIR", d.join("from-env"))
        .output()
        .unwrap();
    assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("from-env/run.json")).unwrap()).unwrap();
    let cfg = &run["run"]["config"];
    assert_eq!(cfg["max_iters"], 7);
    assert_eq!(cfg["batch"], 4);
    assert_eq!(cfg["seed"], 2);
    assert!(run["run"]["samples_drawn"].as_u64().unwrap() <= 28);
    for f in ["metrics.json", "path.csv"] {
        assert!(d.join("from-env").join(f).exists());
    }
}

#[test]
fn benchmark_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_map(d);
    fs::write(
        d.join("spec.json"),
        r#"{"name": "t", "source": {"type": "map", "path": "map.json"}, "seeds": [0, 1, 2],
            "planner": {"max_iters": 20}, "rrt": {"max_samples": 300}}"#,
    )
    .unwrap();
    let o = occplan(&["benchmark", "--spec", "spec.json", "-o", "out", "--methods", "rrt"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(d.join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("metric,rrt_mean,rrt_stderr\n"));
    assert_eq!(fs::read_to_string(d.join("out/runs.csv")).unwrap().lines().count(), 4);
    assert!(!d.join("out/planner").exists());
    let o = occplan(&["benchmark", "--spec", "missing.json"], d);
    assert_eq!(code(&o), 2);
}
