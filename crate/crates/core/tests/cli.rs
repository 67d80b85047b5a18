use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stopvi::check::integrator_2d;
use stopvi::config::{CriterionConfig, CriterionName, ProblemConfig, RunConfig};
use stopvi::grid::GridSpec;
use stopvi::InterpMode;

fn stopvi(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stopvi"));
    cmd.args(args);
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn run(cmd: &str, cfg: &Path, out: &Path, tail: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stopvi"));
    c.arg(cmd)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(tail);
    c.output().unwrap()
}

fn tiny(kind: CriterionName, eps: f64) -> RunConfig {
    RunConfig::cubic(3, 3, CriterionConfig::scalar(kind, eps))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn loose_tolerance_stops_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(CriterionName::Uniform, 1e6));
    let out = dir.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["d"], 0);
    for f in ["values.vtbl", "prev.vtbl", "policy.csv", "progress.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn iteration_cap_exits_three_with_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(CriterionName::Uniform, 1e-9);
    c.d_max = 1;
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(out.join("values.vtbl").exists());
    assert_eq!(json(&out.join("manifest.json"))["d"], 1);
}

#[test]
fn malformed_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ \"schema_version\": ").unwrap();
    let o = stopvi(&["solve", "--config"], &[&path]);
    assert_eq!(o.status.code(), Some(2));

    let mut c = tiny(CriterionName::Uniform, 1.0);
    c.state_grid.counts = vec![1, 3];
    std::fs::write(&path, c.to_json()).unwrap();
    let o = stopvi(&["solve", "--config"], &[&path]);
    assert_eq!(o.status.code(), Some(2));

    let o = stopvi(&["solve", "--no-such-flag"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unavailable_certificate_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(CriterionName::Uniform, 1e6));
    let out = dir.path().join("out");
    assert_eq!(run("solve", &cfg, &out, &[]).status.code(), Some(0));
    let o = run("certify", &cfg, &out, &["--require", "exponential"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(out.join("certificate.json").exists());
    let o = run(
        "certify",
        &cfg,
        &out,
        &["--require", "eps-star-global", "--require", "d-bar"],
    );
    assert_eq!(o.status.code(), Some(0));
    let cert = json(&out.join("certificate.json"));
    assert_eq!(cert["d_bar"]["value"]["d_bar"], 71);
}

#[test]
fn zero_tolerance_gives_zero_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::cubic(3, 3, CriterionConfig::scalar(CriterionName::Uniform, 0.0));
    c.problem = ProblemConfig::Polynomial {
        spec: integrator_2d(),
    };
    c.state_grid = GridSpec {
        lower: vec![-3.0; 2],
        upper: vec![3.0; 2],
        counts: vec![7, 7],
    };
    c.input_grid = GridSpec {
        lower: vec![-1.0; 2],
        upper: vec![1.0; 2],
        counts: vec![3, 3],
    };
    c.interp = InterpMode::NearestNeighbor;
    c.simulation.x0 = Some(vec![3.0, -2.0]);
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = run("certify", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let cert = json(&out.join("certificate.json"));
    let v = cert["v_eps"].as_array().unwrap();
    assert_eq!(v.len(), 49);
    assert!(v.iter().all(|x| x.as_f64() == Some(0.0)));
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(CriterionName::Relative, 1e6));
    let out = dir.path().join("out");
    assert_eq!(run("solve", &cfg, &out, &[]).status.code(), Some(0));
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let rows = std::fs::read_to_string(out.join("trajectory.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + 41);
    assert_eq!(json(&out.join("simulation.json"))["steps"], 40);
}

#[test]
fn artifacts_must_match_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(CriterionName::Uniform, 1e6));
    let out = dir.path().join("out");
    assert_eq!(run("solve", &cfg, &out, &[]).status.code(), Some(0));
    let other = dir.path().join("other");
    std::fs::create_dir(&other).unwrap();
    let cfg2 = write_config(&other, &tiny(CriterionName::Relative, 1e6));
    assert_eq!(run("certify", &cfg2, &out, &[]).status.code(), Some(2));
}

#[test]
fn check_passes_and_detects_injected_error() {
    let o = stopvi(&["check"], &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let o = stopvi(&["check", "--inject", "negated-cost"], &[]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn config_round_trip() {
    let c = RunConfig::smoke(CriterionConfig::scalar(CriterionName::MixedMin, 0.05));
    let back = RunConfig::from_json(&c.to_json()).unwrap();
    assert_eq!(back.to_json(), c.to_json());
}
