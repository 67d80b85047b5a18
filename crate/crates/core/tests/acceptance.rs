//! Acceptance criteria. Each test prints one `ACCEPTANCE <id> PASS|FAIL`
//! line with the measured values before asserting.

use std::io::Write;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use stopvi::certificates::{conservative_horizon, epsilon_star_global, near_optimality_bound};
use stopvi::check::{self, CheckOptions, SmokeRuns};
use stopvi::reproduce::{self, ExperimentSetup, Scale, ValueSequence};
use stopvi::{CubicIntegrator, StoppingCriterion};

fn report(id: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "ACCEPTANCE {id} {verdict}: {detail}").unwrap();
    out.flush().unwrap();
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Full-resolution `V_0..V_12` shared by criteria 1 and 2.
fn full_sequence() -> &'static ValueSequence {
    static SEQ: OnceLock<ValueSequence> = OnceLock::new();
    SEQ.get_or_init(|| {
        let setup = ExperimentSetup {
            workers: workers(),
            ..ExperimentSetup::new(Scale::Full)
        };
        ValueSequence::compute(
            &CubicIntegrator::default(),
            &setup,
            Scale::Full.cap(),
            |_, _| {},
        )
        .expect("full-scale sweeps")
    })
}

#[test]
fn criterion_1_iteration_table() {
    let cells = reproduce::table1(full_sequence());
    let exact = cells.iter().filter(|c| c.exact).count();
    let near = cells.iter().filter(|c| c.within_one).count();
    let relative_exact = cells
        .iter()
        .filter(|c| c.criterion == "relative")
        .all(|c| c.exact);
    let rows: Vec<String> = ["uniform", "relative", "mixed_min"]
        .iter()
        .map(|name| {
            let ds: Vec<String> = cells
                .iter()
                .filter(|c| c.criterion == *name)
                .map(|c| c.computed.map_or("-".into(), |d| d.to_string()))
                .collect();
            format!("{name} [{}]", ds.join(","))
        })
        .collect();
    let pass = exact >= 19 && near == 21 && relative_exact;
    report(
        "1",
        pass,
        &format!(
            "exact {exact}/21, within one {near}/21, relative row exact {relative_exact}; {}",
            rows.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_running_cost_table() {
    let p = CubicIntegrator::default();
    let setup = ExperimentSetup::new(Scale::Full);
    let cols = reproduce::table2(&p, full_sequence(), setup.selection);
    let detail: Vec<String> = cols
        .iter()
        .map(|c| {
            format!(
                "d={} V={:.0} s={:.3}{}",
                c.d,
                c.v_run,
                c.sigma_final,
                if c.ok() { "" } else { "!" }
            )
        })
        .collect();
    let pass = cols.len() == 9 && cols.iter().all(|c| c.ok());
    report("2", pass, &detail.join(", "));
    assert!(pass);
}

#[test]
fn criterion_3_closed_form_certificates() {
    let p = CubicIntegrator::<f64>::default();
    let d_bar = conservative_horizon(&p, 1.0).unwrap();
    let eps_star = epsilon_star_global(&p).unwrap();
    let v_eps =
        near_optimality_bound(&p, &StoppingCriterion::uniform(0.01), &[3.0, -40.0]).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let pass = d_bar == 71 && rel(eps_star, 1.0 / 14.0) <= 1e-12 && rel(v_eps, 0.14) <= 1e-12;
    report(
        "3",
        pass,
        &format!("d_bar = {d_bar}, eps* = {eps_star}, v_eps = {v_eps}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_property_suites() {
    let start = Instant::now();
    let options = CheckOptions {
        workers: workers(),
        ..CheckOptions::default()
    };
    let smoke = SmokeRuns::compute(&options).expect("smoke runs");
    let suites = [
        (
            "4a",
            vec![check::monotonicity_suite(&[
                ("uniform", &smoke.uniform_long),
                ("relative", &smoke.relative),
            ])],
        ),
        ("4b", vec![check::terminal_stage_suite()]),
        ("4c", vec![check::oracle_suite()]),
        (
            "4d",
            vec![
                check::snapped_sandwich_suite(),
                check::smoke_sandwich_suite(&smoke.uniform, &smoke.uniform_long),
            ],
        ),
        ("4e", vec![check::gap_bound_suite()]),
        ("4f", vec![check::comparison_round_trip_suite(0)]),
        ("4g", vec![check::envelope_suite(&smoke.relative)]),
    ];
    let mut all = true;
    for (id, results) in &suites {
        let pass = results.iter().all(|r| r.passed);
        let detail: Vec<String> = results
            .iter()
            .map(|r| format!("{}: {}", r.name, r.detail))
            .collect();
        report(id, pass, &detail.join("; "));
        all &= pass;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = all && secs < 60.0;
    report("4", pass, &format!("all suites {all}, {secs:.1} s"));
    assert!(pass);
}

#[test]
fn criterion_5_determinism_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = stopvi::config::RunConfig::smoke(stopvi::config::CriterionConfig::scalar(
        stopvi::config::CriterionName::Uniform,
        20.0,
    ));
    let cfg_path = dir.path().join("smoke.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let mut outputs = Vec::new();
    for w in [1, 4] {
        let out = dir.path().join(format!("w{w}"));
        let status = Command::new(env!("CARGO_BIN_EXE_stopvi"))
            .args(["solve", "--config"])
            .arg(&cfg_path)
            .args(["--workers", &w.to_string(), "--out"])
            .arg(&out)
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        outputs.push((read("values.vtbl"), read("prev.vtbl"), read("policy.csv")));
    }
    let pass = outputs[0] == outputs[1];
    report(
        "5",
        pass,
        &format!("values.vtbl, prev.vtbl and policy.csv identical for workers 1 and 4: {pass}"),
    );
    assert!(pass);
}
