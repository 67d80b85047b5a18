use std::process::Command;

use stopvi::config::{CriterionConfig, CriterionName, RunConfig};
use stopvi::run_until_stop;
use stopvi::CubicIntegrator;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn worker_count_does_not_change_tables() {
    let cfg = RunConfig::smoke(CriterionConfig::scalar(CriterionName::Uniform, 20.0));
    let p = CubicIntegrator::default();
    let runs: Vec<_> = [1, 2, 4]
        .into_iter()
        .map(|w| {
            let (sg, ig) = cfg.grids().unwrap();
            let options = stopvi::RunOptions {
                workers: w,
                ..cfg.run_options()
            };
            run_until_stop(&p, sg, ig, cfg.criterion.build().unwrap(), &options).unwrap()
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.d, runs[0].d);
        assert_eq!(bits(r.v_curr.values()), bits(runs[0].v_curr.values()));
        assert_eq!(bits(r.v_prev.values()), bits(runs[0].v_prev.values()));
        assert_eq!(r.policy, runs[0].policy);
        assert_eq!(bits(&r.gap), bits(&runs[0].gap));
    }
}

#[test]
fn repeated_solves_write_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::cubic(
        40,
        41,
        CriterionConfig::scalar(CriterionName::Relative, 0.5),
    );
    let path = dir.path().join("c.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    let mut tables = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let o = Command::new(env!("CARGO_BIN_EXE_stopvi"))
            .arg("solve")
            .arg("--config")
            .arg(&path)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(matches!(o.status.code(), Some(0 | 3)));
        tables.push(std::fs::read(out.join("values.vtbl")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
}
