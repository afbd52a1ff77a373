use std::path::Path;
use std::process::{Command, Output};

fn sdegeo(dir: &Path, args: &[&str], config: &str) -> Output {
    let path = dir.join("config.json");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_sdegeo"))
        .args(args)
        .arg(&path)
        .arg("--quiet")
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let ok = sdegeo(d, &["run"], r#"{"command": "verify", "scenario": {"name": "circle"}, "output": {"report": "r.json"}}"#);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    // Bochner needs a positive spectral gap; flat space without drift has none.
    let na = sdegeo(
        d,
        &["estimate"],
        r#"{"command": "estimate", "study": "bochner", "scenario": {"name": "flat"}, "x0": [0, 0], "t": 0.1, "dt": 0.01, "n_paths": 100}"#,
    );
    assert_eq!(na.status.code(), Some(1));

    let bad = sdegeo(d, &["run"], r#"{"command": "verify", "scenario": {"name": "twisted-plane"}}"#);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("alpha"));

    let few = sdegeo(d, &["estimate"], r#"{"command": "estimate", "study": "moments", "scenario": {"name": "sphere-gradient"}, "x0": [0, 0, 1], "n_paths": 10}"#);
    assert_eq!(few.status.code(), Some(2));

    // Degenerate at the chart origin: rejected when the scenario is built.
    let origin = sdegeo(d, &["tensors"], r#"{"command": "tensors", "scenario": {"name": "custom", "n": 1, "m": 1, "x": [["x1"]]}, "points": [[0.5]]}"#);
    assert_eq!(origin.status.code(), Some(2), "{}", String::from_utf8_lossy(&origin.stderr));

    // Degenerate only at the queried point: a numerical failure.
    let singular = sdegeo(d, &["tensors"], r#"{"command": "tensors", "scenario": {"name": "custom", "n": 1, "m": 1, "x": [["x1 - 1"]]}, "points": [[1]]}"#);
    assert_eq!(singular.status.code(), Some(3), "{}", String::from_utf8_lossy(&singular.stderr));
}

#[test]
fn flags_override_config_and_dump_paths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = sdegeo(
        d,
        &["simulate", "--paths", "3", "--t", "0.05", "--seed", "9", "--out", "s.json", "--dump-paths", "p.csv"],
        r#"{"command": "verify", "scenario": {"name": "sphere-gradient"}, "x0": [0, 0, 1], "dt": 0.01}"#,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "simulate");
    assert_eq!(report["config"]["seed"], 9);
    let mut csv = csv::Reader::from_path(d.join("p.csv")).unwrap();
    let headers = csv.headers().unwrap().clone();
    assert_eq!(&headers[0], "path");
    let rows: Vec<_> = csv.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3 * 6);
    assert_eq!(&rows[rows.len() - 1][0], "2");
}

#[test]
fn schema_subcommand_prints_the_schema() {
    let out = Command::new(env!("CARGO_BIN_EXE_sdegeo")).arg("schema").output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["title"], "sdegeo run configuration");
}
