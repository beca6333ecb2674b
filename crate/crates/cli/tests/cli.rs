use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const PARAMS: &str = r#"{
  "alpha": [0.6, 0.4],
  "theta": [
    [[0.5, 0.3, 0.1, 0.05, 0.05], [0.05, 0.05, 0.1, 0.3, 0.5]],
    [[0.6, 0.3, 0.1], [0.1, 0.3, 0.6]]
  ],
  "fixed_mask": [false, false]
}"#;

fn rankmix(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankmix")).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = rankmix(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A temporary directory holding a simulated dataset `d.csv` with schema `s.toml`.
fn simulated(t: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("params.json"), PARAMS).unwrap();
    let t = t.to_string();
    ok(
        &["simulate", "--params", "params.json", "--t", &t, "--n", "3,2", "--seed", "4", "--out", "d.csv", "--schema-out", "s.toml"],
        dir.path(),
    );
    dir
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_schema_is_a_usage_error() {
    let dir = simulated(10);
    let out = rankmix(&["fit", "--data", "d.csv", "--out", "f.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--schema"));
    assert!(!dir.path().join("f.json").exists());
}

#[test]
fn malformed_data_names_the_line() {
    let dir = simulated(10);
    let mut csv = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    csv.push_str("r999,V1,1,2\nr999,V1,2,2\nr999,V2,1,1\n");
    fs::write(dir.path().join("bad.csv"), csv).unwrap();
    let out = rankmix(&["fit", "--data", "bad.csv", "--schema", "s.toml", "--out", "f.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    // header + 10 individuals x 5 rows, then the two appended rows
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.csv:53:") && stderr.contains("twice"), "{stderr}");
}

#[test]
fn simulate_fit_report_gof() {
    let dir = simulated(120);
    let stdout = ok(&["fit", "--data", "d.csv", "--schema", "s.toml", "--k", "2", "--seed", "1", "--out", "f.json"], dir.path());
    assert!(stdout.contains("relative_frequency"));

    let doc = json(dir.path().join("f.json"));
    assert_eq!(doc["format"], "rankmix-results/1");
    assert_eq!(doc["individual_ids"].as_array().unwrap().len(), 120);
    assert_eq!(doc["params"]["alpha"].as_array().unwrap().len(), 2);
    assert!(doc["manifest"].get("wall_clock_seconds").is_none());
    let sidecar = json(dir.path().join("f.json.manifest.json"));
    assert!(sidecar["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(sidecar["dataset_digest"], doc["manifest"]["dataset_digest"]);

    let report = ok(&["report", "--fit", "f.json", "--subset", "1,2", "--out", "r.json"], dir.path());
    assert!(report.contains("support ratios"));
    let r = json(dir.path().join("r.json"));
    let freqs: f64 = r["relative_frequencies"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((freqs - 1.0).abs() < 1e-9);

    ok(&["gof", "--fit", "f.json", "--data", "d.csv", "--schema", "s.toml", "--simulations", "20", "--out", "g.csv"], dir.path());
    let gof = fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let mut lines = gof.lines();
    assert_eq!(lines.next(), Some("variable,alternative,simulation_index,first_choice_count"));
    // (5 + 3 alternatives) x (20 simulations + the observed row)
    assert_eq!(lines.count(), 8 * 21);

    // a fit file can be used as simulation parameters
    ok(&["simulate", "--params", "f.json", "--t", "5", "--n", "1", "--out", "again.csv"], dir.path());
    assert_eq!(fs::read_to_string(dir.path().join("again.csv")).unwrap().lines().count(), 1 + 5 * 2);
}

#[test]
fn identical_seeds_give_identical_files() {
    let dir = simulated(80);
    let common = ["--data", "d.csv", "--schema", "s.toml", "--k", "3", "--seed", "9"];
    let run = |out: &str, parallel: bool| {
        let mut args = vec!["fit"];
        args.extend(common);
        args.extend(["--out", out]);
        if parallel {
            args.push("--parallel");
        }
        ok(&args, dir.path());
        fs::read(dir.path().join(out)).unwrap()
    };
    let first = run("a.json", false);
    assert_eq!(first, run("b.json", false));
    assert_eq!(first, run("c.json", true));
    assert_eq!(first, run("d.json", true));
}

#[test]
fn single_subgroup_fit() {
    let dir = simulated(60);
    ok(&["fit", "--data", "d.csv", "--schema", "s.toml", "--k", "1", "--out", "f.json"], dir.path());
    let doc = json(dir.path().join("f.json"));
    assert_eq!(doc["params"]["alpha"].as_array().unwrap().len(), 1);
    assert_eq!(doc["fit"]["converged"], true);
}

#[test]
fn fixed_subgroups_are_reported() {
    let dir = simulated(60);
    ok(
        &["fit", "--data", "d.csv", "--schema", "s.toml", "--k", "4", "--fixed-uniform", "--fixed-presentation", "--out", "f.json"],
        dir.path(),
    );
    let doc = json(dir.path().join("f.json"));
    let mask: Vec<bool> = doc["params"]["fixed_mask"].as_array().unwrap().iter().map(|b| b.as_bool().unwrap()).collect();
    assert_eq!(mask, vec![false, false, true, true]);
    let uniform = &doc["params"]["theta"][0][2];
    assert!(uniform.as_array().unwrap().iter().all(|t| (t.as_f64().unwrap() - 0.2).abs() < 1e-12));

    let out = rankmix(&["fit", "--data", "d.csv", "--schema", "s.toml", "--k", "1", "--fixed-uniform", "--fixed-presentation", "--out", "x.json"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn select_k_and_bootstrap() {
    let dir = simulated(80);
    let stdout = ok(
        &[
            "select-k", "--data", "d.csv", "--schema", "s.toml", "--k-range", "1-2", "--restarts", "1", "--split-seed", "3",
            "--out", "sel.json", "--fit-out", "best.json",
        ],
        dir.path(),
    );
    assert!(stdout.contains("selected K"));
    let sel = json(dir.path().join("sel.json"));
    let best_k = sel["best_k"].as_u64().unwrap();
    assert_eq!(sel["table"].as_array().unwrap().len(), 2);
    let best = json(dir.path().join("best.json"));
    assert_eq!(best["params"]["alpha"].as_array().unwrap().len() as u64, best_k);

    ok(
        &[
            "bootstrap", "--data", "d.csv", "--schema", "s.toml", "--fit", "best.json", "--bootstrap-b", "4", "--level", "0.9",
            "--out", "boot.json",
        ],
        dir.path(),
    );
    let boot = json(dir.path().join("boot.json"));
    assert_eq!(boot["summary"]["alpha"].as_array().unwrap().len() as u64, best_k);
    assert_eq!(boot["summary"]["level"], 0.9);
}

#[test]
fn bad_k_range_is_rejected() {
    let dir = simulated(10);
    let out = rankmix(&["select-k", "--data", "d.csv", "--schema", "s.toml", "--k-range", "5-2", "--out", "x.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("range"));
}
