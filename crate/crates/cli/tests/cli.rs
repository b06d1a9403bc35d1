use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delaysteer"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn run_with(out: &Path, cfg: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--config", cfg.to_str().unwrap()];
    full.extend_from_slice(args);
    run(out, &full)
}

fn rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_owned).collect();
    let body = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    (header, body)
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let di = config("double_integrator.json");
    assert_eq!(run_with(out, &di, &["check"]).status.code(), Some(0));
    assert_eq!(run(out, &["check"]).status.code(), Some(2));
    assert_eq!(run(out, &["--config", "/missing.json", "check"]).status.code(), Some(2));
    assert_eq!(run_with(out, &config("no_input.json"), &["check"]).status.code(), Some(3));
    assert_eq!(run_with(out, &config("building.json"), &["check"]).status.code(), Some(3));
    assert_eq!(run_with(out, &di, &["steer", "--tol", "0"]).status.code(), Some(4));
    let below = run_with(out, &di, &["steer", "--target-cov", "1e-4,0;0,1e-4"]);
    assert_eq!(below.status.code(), Some(5));
    assert_eq!(run_with(out, &di, &["lq", "--Q", "1,2;3"]).status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let args = ["simulate", "--law", "lq", "--paths", "200", "--dt", "0.004", "--seed", "3"];
    let di = config("double_integrator.json");
    for dir in [&first, &second] {
        assert!(run_with(dir.path(), &di, &args).status.success());
    }
    for name in ["moments.csv", "paths.csv"] {
        assert_eq!(
            fs::read(first.path().join(name)).unwrap(),
            fs::read(second.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn scalar_threshold_column() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_with(dir.path(), &config("scalar_ou.json"), &["sigma-min"]).status.success());
    let (header, body) = rows(&dir.path().join("threshold.csv"));
    assert_eq!(header, ["t", "sigma_min_1_1", "weighted"]);
    assert_eq!(body.first().unwrap()[0], 1.0);
    assert_eq!(body.last().unwrap()[0], 3.0);
    let exact = 1.0 - (-1.0f64).exp();
    for row in &body {
        assert!((row[1] - exact).abs() < 1e-9);
        assert_eq!(row[1], row[2]);
    }
}

#[test]
fn noiseless_system_has_zero_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quiet.json");
    let text = fs::read_to_string(config("double_integrator.json"))
        .unwrap()
        .replace("[[0.1], [1.0]]", "[[0.0], [0.0]]");
    assert!(text.contains("[[0.0], [0.0]]"));
    fs::write(&cfg, text).unwrap();
    assert!(run_with(dir.path(), &cfg, &["sigma-min"]).status.success());
    let (_, body) = rows(&dir.path().join("threshold.csv"));
    assert!(body.iter().all(|r| r[1..].iter().all(|v| *v == 0.0)));
}

#[test]
fn building_threshold_matches_sigma_min() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(run(out, &["building", "--paths", "40"]).status.success());
    let cfg = config("building.json");
    assert!(run_with(out, &cfg, &["--grid-steps", "670", "sigma-min"]).status.success());
    let (_, fig2) = rows(&out.join("fig2.csv"));
    let (_, threshold) = rows(&out.join("threshold.csv"));
    let by_time: HashMap<u64, f64> = threshold.iter().map(|r| (r[0].round() as u64, r[1])).collect();
    let mut matched = 0;
    for row in &fig2 {
        if let Some(v) = by_time.get(&(row[0].round() as u64)) {
            if (row[0] - row[0].round()).abs() < 1e-9 {
                assert!((row[2] - v).abs() <= 1e-9, "t = {}", row[0]);
                matched += 1;
            }
        }
    }
    assert!(matched > 600, "{matched}");
    let (_, fig1) = rows(&out.join("fig1.csv"));
    assert_eq!(fig1[0].len(), 4);
}

#[test]
fn steer_writes_gains_and_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with(dir.path(), &config("double_integrator.json"), &["--grid-steps", "200", "steer"]);
    assert!(out.status.success());
    let (header, body) = rows(&dir.path().join("gains.csv"));
    assert_eq!(header, ["t", "k_1_1", "k_1_2", "pi_1_1", "pi_1_2", "pi_2_2"]);
    assert_eq!(body.len(), 201);
    let (_, predicted) = rows(&dir.path().join("predicted_cov.csv"));
    let end = predicted.last().unwrap();
    assert!((end[1] - 0.11).abs() < 1e-6 && (end[2] - 0.02).abs() < 1e-6 && (end[3] - 0.3).abs() < 1e-6);
}
