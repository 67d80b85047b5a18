//! Invariant suites behind `stopvi check`: exhaustive-enumeration oracle,
//! value monotonicity, the terminal-stage inequality, the sandwich proxy,
//! closed-form cross-checks, comparison-function round trips, envelope
//! containment and spot checks of the standing assumptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::certificates::{
    exponential_claim_allowed, horizon_gap_bound_composed, horizon_gap_bound_linear,
    interp_slack_map, sandwich_check, sandwich_check_with_slack,
};
use crate::comparison::MonotoneFn;
use crate::engine::{
    run_fixed_horizon, run_until_stop, run_until_stop_observed, terminal_stage_excess, RunOptions,
    StoppingCriterion, ViRun,
};
use crate::grid::{InputGrid, InterpMode, StateGrid};
use crate::problem::{
    validate_sa1, AbsPowerSum, AbsPowerTerm, ControlProblem, CubicIntegrator, InputBox, Monomial,
    PolynomialProblem, Sa1Bounds, SampleSpec, Sector,
};
use crate::scalar::Scalar;
use crate::simulate::{closed_loop, envelope_check, InputSelection, DEFAULT_STEPS};

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        SuiteResult {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_error(name: &str, e: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }
}

/// Deliberate defects used to confirm that a suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Flips the sign of the stage cost.
    NegatedCost,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    pub workers: usize,
    pub inject: Option<Injection>,
    pub smoke_nodes: usize,
    pub smoke_inputs: usize,
    /// Uniform tolerance of the smoke sandwich run.
    pub smoke_uniform_eps: f64,
    /// Sweep cap for smoke runs whose criterion does not trigger.
    pub smoke_d_max: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            workers: 1,
            inject: None,
            smoke_nodes: 100,
            smoke_inputs: 101,
            smoke_uniform_eps: 20.0,
            smoke_d_max: 50,
        }
    }
}

/// Wraps a problem and negates its stage cost.
pub struct NegatedCost<'a>(pub &'a dyn ControlProblem<f64>);

impl ControlProblem<f64> for NegatedCost<'_> {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.0.step_into(x, u, out)
    }
    fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        -self.0.stage_cost(x, u)
    }
    fn sigma(&self, x: &[f64]) -> f64 {
        self.0.sigma(x)
    }
    fn input_box(&self) -> &InputBox<f64> {
        self.0.input_box()
    }
    fn bounds(&self) -> &Sa1Bounds<f64> {
        self.0.bounds()
    }
}

/// Integer grid `[-r, r]^n` with unit spacing.
pub fn integer_grid(n: usize, r: i32) -> StateGrid<f64> {
    let count = (2 * r + 1) as usize;
    StateGrid::new(vec![-r as f64; n], vec![r as f64; n], vec![count; n]).expect("valid grid")
}

/// `x+ = x + u` in two dimensions with `ℓ = |x1| + |x2| + |u1| + |u2|`,
/// `σ = |x1| + |x2|`, `ᾱ_V = 3𝕀`, `α_W = 𝕀`. On the integer grid
/// `[-3, 3]^2` with inputs `{-1, 0, 1}^2` the bounds hold exactly.
pub fn integrator_2d() -> PolynomialProblem<f64> {
    let abs1 = |index| AbsPowerTerm {
        index,
        coeff: 1.0,
        power: 1.0,
    };
    let lin = |state: Vec<u32>, input: Vec<u32>| Monomial {
        coeff: 1.0,
        state_powers: state,
        input_powers: input,
    };
    PolynomialProblem {
        name: "integrator_2d".into(),
        state_dim: 2,
        input_dim: 2,
        dynamics: vec![
            vec![lin(vec![1], vec![]), lin(vec![], vec![1])],
            vec![lin(vec![0, 1], vec![]), lin(vec![], vec![0, 1])],
        ],
        stage_cost: AbsPowerSum {
            state_terms: vec![abs1(0), abs1(1)],
            input_terms: vec![abs1(0), abs1(1)],
        },
        measure: AbsPowerSum {
            state_terms: vec![abs1(0), abs1(1)],
            input_terms: vec![],
        },
        input_box: InputBox {
            lower: vec![-1.0; 2],
            upper: vec![1.0; 2],
        },
        bounds: Sa1Bounds {
            alpha_v_bar: MonotoneFn::linear(3.0),
            alpha_w: MonotoneFn::identity(),
            sector: Some(Sector::global(3.0, 1.0)),
        },
    }
}

fn snapped_options() -> RunOptions<f64> {
    RunOptions {
        interp: InterpMode::NearestNeighbor,
        ..RunOptions::default()
    }
}

/// Minimum over all input sequences of length `d + 1` of the summed stage
/// cost, with every successor rounded to the nearest node (coordinates
/// clamped to the grid box). Costs are summed from the last stage backwards.
pub fn enumeration_oracle<P: ControlProblem<f64> + ?Sized>(
    p: &P,
    grid: &StateGrid<f64>,
    inputs: &[Vec<f64>],
    d: usize,
) -> Vec<f64> {
    let snap = |x: &mut [f64]| {
        for (axis, v) in x.iter_mut().enumerate() {
            let (lo, hi, n) = (grid.lower()[axis], grid.upper()[axis], grid.counts()[axis]);
            let h = (hi - lo) / (n - 1) as f64;
            let k = ((*v - lo) / h).round().clamp(0.0, (n - 1) as f64);
            *v = lo + k * h;
        }
    };
    let stages = d + 1;
    let total = inputs.len().pow(stages as u32);
    (0..grid.len())
        .map(|node| {
            let x0 = grid.node_state(&grid.unflatten(node)).expect("node");
            let mut best = f64::INFINITY;
            let mut costs = vec![0.0; stages];
            for code in 0..total {
                let mut x = x0.clone();
                let mut c = code;
                for cost in costs.iter_mut() {
                    let u = &inputs[c % inputs.len()];
                    c /= inputs.len();
                    *cost = p.stage_cost(&x, u);
                    let mut next = vec![0.0; x.len()];
                    p.step_into(&x, u, &mut next);
                    snap(&mut next);
                    x = next;
                }
                let sum = costs.iter().rev().fold(0.0, |acc, &c| c + acc);
                best = best.min(sum);
            }
            best
        })
        .collect()
}

fn grid_inputs(ig: &InputGrid<f64>) -> Vec<Vec<f64>> {
    (0..ig.len())
        .map(|i| ig.node_state(&ig.unflatten(i)).expect("input node"))
        .collect()
}

/// DP values equal the enumeration minimum exactly on snapped cubic
/// integrators with 3 and 5 inputs, `d <= 4`.
pub fn oracle_suite() -> SuiteResult {
    let name = "oracle_equivalence";
    let mut cells = 0;
    for (bound, count) in [(1.0, 3), (2.0, 5)] {
        let p = CubicIntegrator::new(bound);
        let sg = integer_grid(2, 3);
        let ig = InputGrid::uniform_1d(-bound, bound, count).expect("input grid");
        let inputs = grid_inputs(&ig);
        let run = match run_fixed_horizon(
            &p,
            sg.clone(),
            ig,
            StoppingCriterion::uniform(0.0),
            4,
            &snapped_options(),
        ) {
            Ok(r) => r,
            Err(e) => return SuiteResult::from_error(name, e),
        };
        for d in 0..=4 {
            let oracle = enumeration_oracle(&p, &sg, &inputs, d);
            let dp = run.table(d as isize).expect("history");
            if let Some(node) = (0..oracle.len()).find(|&i| dp.values()[i] != oracle[i]) {
                return SuiteResult::new(
                    name,
                    false,
                    format!(
                        "{count} inputs, d={d}, node {node}: dp {} oracle {}",
                        dp.values()[node],
                        oracle[node]
                    ),
                );
            }
            cells += oracle.len();
        }
    }
    SuiteResult::new(name, true, format!("{cells} node values equal"))
}

/// `V_d >= V_{d-1}` at every node after every sweep.
pub fn monotonicity_suite(runs: &[(&str, &ViRun<f64>)]) -> SuiteResult {
    let name = "value_monotonicity";
    let mut sweeps = 0;
    for (label, run) in runs {
        for d in 0..=run.d {
            let (prev, curr) = match (run.table(d as isize - 1), run.table(d as isize)) {
                (Some(a), Some(b)) => (a, b),
                _ => return SuiteResult::new(name, false, format!("{label}: history missing")),
            };
            let bad = prev
                .values()
                .iter()
                .zip(curr.values())
                .filter(|(a, b)| b < a)
                .count();
            if bad > 0 {
                return SuiteResult::new(
                    name,
                    false,
                    format!("{label}: {bad} nodes decrease at d={d}"),
                );
            }
            sweeps += 1;
        }
    }
    SuiteResult::new(name, true, format!("{sweeps} sweeps checked"))
}

/// `ℓ(x*(d), u*(d)) <= V_d − V_{d−1}` at every node for `d <= 5` on
/// snapped instances.
pub fn terminal_stage_suite() -> SuiteResult {
    let name = "terminal_stage_inequality";
    let cubic = CubicIntegrator::new(1.0);
    let integ = integrator_2d();
    let cases: [(&dyn ControlProblem<f64>, InputGrid<f64>); 2] = [
        (&cubic, InputGrid::uniform_1d(-1.0, 1.0, 3).expect("grid")),
        (
            &integ,
            InputGrid::new(vec![-1.0; 2], vec![1.0; 2], vec![3, 3]).expect("grid"),
        ),
    ];
    let mut worst = f64::NEG_INFINITY;
    for (p, ig) in cases {
        for d in 0..=5 {
            let run = match run_fixed_horizon(
                p,
                integer_grid(2, 3),
                ig.clone(),
                StoppingCriterion::uniform(0.0),
                d,
                &snapped_options(),
            ) {
                Ok(r) => r,
                Err(e) => return SuiteResult::from_error(name, e),
            };
            match terminal_stage_excess(&run, p) {
                Ok((excess, node)) => {
                    if excess > 0.0 {
                        return SuiteResult::new(
                            name,
                            false,
                            format!("{}: d={d} node {node} exceeds by {excess}", p.name()),
                        );
                    }
                    worst = worst.max(excess);
                }
                Err(e) => return SuiteResult::from_error(name, e),
            }
        }
    }
    SuiteResult::new(name, true, format!("largest excess {worst}"))
}

/// Exact sandwich on the snapped integrator for several criteria.
pub fn snapped_sandwich_suite() -> SuiteResult {
    let name = "sandwich_snapped";
    let p = integrator_2d();
    let ig = InputGrid::new(vec![-1.0; 2], vec![1.0; 2], vec![3, 3]).expect("grid");
    let criteria = [
        StoppingCriterion::relative(0.5),
        StoppingCriterion::relative(0.2),
        StoppingCriterion::relative(0.05),
        StoppingCriterion::uniform(2.0),
        StoppingCriterion::uniform(0.5),
        StoppingCriterion::mixed_min(0.3),
    ];
    let mut detail = Vec::new();
    for crit in criteria {
        let label = format!("{}({})", crit.kind().label(), crit.epsilon()[0]);
        let result = sandwich_pair(&p, integer_grid(2, 3), ig.clone(), crit, &snapped_options())
            .and_then(|(run, long)| {
                sandwich_check(&p, &run, &long, 0.0)
                    .map_err(|e| e.to_string())
                    .map(|r| (run, r))
            });
        match result {
            Ok((run, r)) if r.holds() && run.stopped() => detail.push(format!(
                "{label} d={} excess {:.3}",
                r.d, r.worst_upper_excess
            )),
            Ok((run, r)) => {
                return SuiteResult::new(
                    name,
                    false,
                    format!(
                        "{label}: stopped={} lower {} upper {} worst {}",
                        run.stopped(),
                        r.lower_violations,
                        r.upper_violations,
                        r.worst_upper_excess
                    ),
                )
            }
            Err(e) => return SuiteResult::from_error(name, e),
        }
    }
    SuiteResult::new(name, true, detail.join("; "))
}

/// The stopped run and the run at `D = d + 20` on the same grids.
pub fn sandwich_pair<P: ControlProblem<f64> + ?Sized>(
    p: &P,
    sg: StateGrid<f64>,
    ig: InputGrid<f64>,
    crit: StoppingCriterion<f64>,
    options: &RunOptions<f64>,
) -> Result<(ViRun<f64>, ViRun<f64>), String> {
    let run = run_until_stop(p, sg.clone(), ig.clone(), crit.clone(), options)
        .map_err(|e| e.to_string())?;
    let long =
        run_fixed_horizon(p, sg, ig, crit, run.d + 20, options).map_err(|e| e.to_string())?;
    Ok((run, long))
}

/// Sandwich on a smoke-scale cubic run with the per-node interpolation
/// slack.
pub fn smoke_sandwich_suite(run: &ViRun<f64>, long: &ViRun<f64>) -> SuiteResult {
    let name = "sandwich_smoke";
    let p = CubicIntegrator::default();
    if !run.stopped() {
        return SuiteResult::new(name, false, format!("run not terminated at d={}", run.d));
    }
    let slack = interp_slack_map(&p, run);
    match sandwich_check_with_slack(&p, run, long, &slack) {
        Ok(r) => SuiteResult::new(
            name,
            r.holds(),
            format!(
                "d={} D={} lower {} upper {} worst excess {:.4} at node {}",
                r.d,
                r.long_d,
                r.lower_violations,
                r.upper_violations,
                r.worst_upper_excess,
                r.worst_upper_node
            ),
        ),
        Err(e) => SuiteResult::from_error(name, e),
    }
}

/// Composition and closed-form termination bounds agree within 1e-9
/// relative for `d` in `0..=100`.
pub fn gap_bound_suite() -> SuiteResult {
    let name = "gap_bound_forms";
    let p = CubicIntegrator::default();
    let mut worst = 0.0f64;
    for sigma in [1e-3, 1.0, 2000.0] {
        for d in 0..=100 {
            let (a, b): (f64, f64) = match (
                horizon_gap_bound_composed(&p, d, sigma),
                horizon_gap_bound_linear(&p, d, sigma),
            ) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return SuiteResult::from_error(name, e),
            };
            let rel = (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            if rel > 1e-9 {
                return SuiteResult::new(name, false, format!("d={d} sigma={sigma}: {a} vs {b}"));
            }
        }
    }
    SuiteResult::new(
        name,
        true,
        format!("largest relative difference {worst:.2e}"),
    )
}

/// One representative of every comparison-function class.
pub fn comparison_classes() -> Vec<(&'static str, MonotoneFn<f64>)> {
    let lin = MonotoneFn::linear;
    vec![
        ("identity", MonotoneFn::identity()),
        ("linear", lin(14.0)),
        ("power", MonotoneFn::power(2.0, 3.0)),
        ("compose", MonotoneFn::power(1.0, 2.0).after(lin(3.0))),
        ("scale", MonotoneFn::power(1.0, 0.5).scaled(4.0)),
        (
            "sum",
            MonotoneFn::Sum {
                terms: vec![lin(1.0), MonotoneFn::power(1.0, 3.0)],
            },
        ),
        (
            "min",
            MonotoneFn::Min {
                terms: vec![lin(2.0), MonotoneFn::power(1.0, 2.0)],
            },
        ),
        (
            "max",
            MonotoneFn::Max {
                terms: vec![lin(0.5), MonotoneFn::power(1.0, 1.5)],
            },
        ),
        ("identity_minus", lin(1.0 / 28.0).subtracted_from_identity()),
        (
            "piecewise_linear",
            MonotoneFn::piecewise_linear(vec![[0.0, 0.0], [1.0, 2.0], [3.0, 2.5], [10.0, 30.0]])
                .expect("valid"),
        ),
        ("inverse", MonotoneFn::power(1.0, 3.0).inverted()),
        ("restricted", lin(7.0).restricted(1e9)),
    ]
}

/// `f(f⁻¹(y))` within `10·tol` of `y` on 100 random samples per class.
pub fn comparison_round_trip_suite(seed: u64) -> SuiteResult {
    let name = "comparison_round_trip";
    let tol = <f64 as Scalar>::inversion_tolerance();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (class, f) in comparison_classes() {
        for _ in 0..100 {
            let s = 10f64.powf(rng.gen_range(-3.0..4.0));
            let result = f
                .evaluate(s)
                .and_then(|y| f.inverse(y, tol).map(|back| (y, back)))
                .and_then(|(y, back)| f.evaluate(back).map(|fy| (y, fy)));
            match result {
                Ok((y, fy)) => {
                    let err = (fy - y).abs() / y.max(1.0);
                    worst = worst.max(err);
                    if err > 10.0 * tol {
                        return SuiteResult::new(
                            name,
                            false,
                            format!("{class} at s={s}: {fy} vs {y}"),
                        );
                    }
                }
                Err(e) => return SuiteResult::from_error(name, format!("{class} at s={s}: {e}")),
            }
        }
    }
    SuiteResult::new(name, true, format!("largest scaled residual {worst:.2e}"))
}

/// Exponential-envelope containment of the closed loop from `(10, −1000)`
/// for 40 steps, inputs from the interpolated stored policy.
pub fn envelope_suite(run: &ViRun<f64>) -> SuiteResult {
    let name = "decay_envelope";
    let p = CubicIntegrator::default();
    let t = closed_loop(
        run,
        &p,
        &[10.0, -1000.0],
        DEFAULT_STEPS,
        InputSelection::InterpolatedPolicy,
    );
    let allowed = exponential_claim_allowed(run.criterion.kind());
    match envelope_check(&t, &p, run.criterion.eps_norm(), allowed, 0.0) {
        Ok(r) => SuiteResult::new(
            name,
            r.contained(),
            format!(
                "d={} max ratio {:.3}, {} violating steps, final sigma {:.3}",
                run.d,
                r.max_ratio,
                r.violations.len(),
                p.sigma(t.final_state())
            ),
        ),
        Err(e) => SuiteResult::from_error(name, e),
    }
}

/// Spot-checks the standing assumptions of `p` on random samples from the
/// box `[lower, upper]`.
pub fn detectability_suite(
    p: &dyn ControlProblem<f64>,
    lower: &[f64],
    upper: &[f64],
    seed: u64,
) -> SuiteResult {
    let name = "standing_assumptions";
    let samples = SampleSpec::random(p, lower, upper, 200, 50, seed);
    let report = validate_sa1(p, &samples);
    let detail = match report.violations.first() {
        None => format!(
            "{} pairs, {} sector points",
            report.checked_pairs, report.checked_sector_points
        ),
        Some(v) => format!(
            "{} violations, first: {}",
            report.violations.len(),
            serde_json::to_string(v).unwrap_or_default()
        ),
    };
    SuiteResult::new(name, report.passed(), detail)
}

/// Smoke-scale cubic integrator runs shared by several suites.
pub struct SmokeRuns {
    pub uniform: ViRun<f64>,
    pub uniform_long: ViRun<f64>,
    pub relative: ViRun<f64>,
}

impl SmokeRuns {
    /// Uniform (stopped run and `D = d + 20`) and Relative
    /// `ε = 0.01` (capped at `smoke_d_max`), all with full history.
    pub fn compute(options: &CheckOptions) -> Result<Self, String> {
        let p = CubicIntegrator::default();
        let n = options.smoke_nodes;
        let sg = StateGrid::new(vec![-10.0, -1000.0], vec![10.0, 1000.0], vec![n, n])
            .map_err(|e| e.to_string())?;
        let ig =
            InputGrid::uniform_1d(-20.0, 20.0, options.smoke_inputs).map_err(|e| e.to_string())?;
        let run_opts = RunOptions {
            workers: options.workers,
            keep_history: true,
            d_max: options.smoke_d_max,
            ..RunOptions::default()
        };
        let (uniform, uniform_long) = sandwich_pair(
            &p,
            sg.clone(),
            ig.clone(),
            StoppingCriterion::uniform(options.smoke_uniform_eps),
            &run_opts,
        )?;
        let relative = run_until_stop_observed(
            &p,
            sg,
            ig,
            StoppingCriterion::relative(0.01),
            &run_opts,
            |_| {},
        )
        .map_err(|e| e.to_string())?;
        Ok(SmokeRuns {
            uniform,
            uniform_long,
            relative,
        })
    }
}

/// Runs every suite. `problem` and its sampling box feed the
/// standing-assumption check, which an injection corrupts.
pub fn run_all(
    problem: &dyn ControlProblem<f64>,
    lower: &[f64],
    upper: &[f64],
    options: &CheckOptions,
) -> Vec<SuiteResult> {
    let mut out = vec![
        oracle_suite(),
        terminal_stage_suite(),
        snapped_sandwich_suite(),
    ];
    out.push(gap_bound_suite());
    out.push(comparison_round_trip_suite(options.seed));
    let negated;
    let checked: &dyn ControlProblem<f64> = match options.inject {
        Some(Injection::NegatedCost) => {
            negated = NegatedCost(problem);
            &negated
        }
        None => problem,
    };
    out.push(detectability_suite(checked, lower, upper, options.seed));
    match SmokeRuns::compute(options) {
        Ok(smoke) => {
            out.push(monotonicity_suite(&[
                ("uniform", &smoke.uniform_long),
                ("relative", &smoke.relative),
            ]));
            out.push(smoke_sandwich_suite(&smoke.uniform, &smoke.uniform_long));
            out.push(envelope_suite(&smoke.relative));
        }
        Err(e) => out.push(SuiteResult::from_error("smoke_runs", e)),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_hand_values() {
        // From (1, 1) with u in {-1, 0, 1}: u = 0 costs 2 per stage, u = -1
        // costs 3 and lands on (0, 0).
        let p = CubicIntegrator::new(1.0);
        let sg = integer_grid(2, 3);
        let inputs = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let node = sg.flatten(&[4, 4]).unwrap();
        assert_eq!(enumeration_oracle(&p, &sg, &inputs, 0)[node], 2.0);
        assert_eq!(enumeration_oracle(&p, &sg, &inputs, 1)[node], 3.0);
        assert_eq!(enumeration_oracle(&p, &sg, &inputs, 3)[node], 3.0);
    }

    #[test]
    fn small_suites_pass() {
        for r in [
            oracle_suite(),
            terminal_stage_suite(),
            snapped_sandwich_suite(),
            gap_bound_suite(),
            comparison_round_trip_suite(7),
        ] {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn injected_sign_error_is_detected() {
        let p = CubicIntegrator::default();
        let (lo, hi) = ([-10.0, -1000.0], [10.0, 1000.0]);
        assert!(detectability_suite(&p, &lo, &hi, 1).passed);
        assert!(!detectability_suite(&NegatedCost(&p), &lo, &hi, 1).passed);
    }

    #[test]
    fn integrator_bounds_hold_on_grid() {
        let p = integrator_2d();
        let run = run_fixed_horizon(
            &p,
            integer_grid(2, 3),
            InputGrid::new(vec![-1.0; 2], vec![1.0; 2], vec![3, 3]).unwrap(),
            StoppingCriterion::uniform(0.0),
            30,
            &snapped_options(),
        )
        .unwrap();
        for node in 0..run.v_curr.values().len() {
            let sigma = run.ctx.node_sigma()[node];
            assert!(sigma <= run.v_curr.values()[node]);
            assert!(run.v_curr.values()[node] <= 3.0 * sigma);
        }
    }
}
