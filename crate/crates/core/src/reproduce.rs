//! Cubic-integrator experiment: iterations needed per stopping criterion
//! and closed-loop running cost per horizon, compared with the reference
//! tables.

use std::io::Write;

use serde::Serialize;

use crate::config::CriterionName;
use crate::engine::{stop_check, EngineError, SweepContext, ValueIteration};
use crate::grid::{ClampPolicy, GridError, InputGrid, InterpMode, StateGrid, ValueTable};
use crate::problem::{ControlProblem, CubicIntegrator};
use crate::simulate::{policy_rollout, running_cost_estimate, InputSelection, DEFAULT_STEPS};

pub const TABLE1_EPS: [f64; 7] = [10.0, 0.75, 0.1, 0.075, 0.05, 0.025, 0.005];
pub const TABLE1_UNIFORM: [usize; 7] = [6, 7, 8, 8, 8, 8, 9];
pub const TABLE1_RELATIVE: [usize; 7] = [0, 1, 3, 4, 5, 6, 7];
pub const TABLE1_MIXED: [usize; 7] = [6, 7, 8, 8, 8, 8, 9];

pub const TABLE2_D: [usize; 9] = [0, 1, 3, 4, 5, 6, 7, 8, 9];
pub const TABLE2_VRUN: [f64; 9] = [
    77313.0, 45497.0, 19931.0, 19965.0, 19802.0, 20090.0, 20359.0, 20261.0, 20261.0,
];
pub const TABLE2_SIGMA: [f64; 9] = [1982.0, 1138.0, 2.56, 2.84, 1.71, 2.25, 1.84, 1.62, 1.62];

/// Initial state of the closed-loop experiment.
pub const X0: [f64; 2] = [10.0, -1000.0];

/// Relative band for running costs.
pub const VRUN_TOLERANCE: f64 = 0.10;
/// Final measure must stay below this for `d >= 3`.
pub const SIGMA_SETTLED: f64 = 5.0;
/// Final measure must exceed this for `d = 0`.
pub const SIGMA_UNSETTLED: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 340² nodes, 909 inputs.
    Full,
    /// 100² nodes, 101 inputs; no match flags.
    Smoke,
}

impl Scale {
    pub fn nodes(self) -> usize {
        match self {
            Scale::Full => 340,
            Scale::Smoke => 100,
        }
    }

    pub fn inputs(self) -> usize {
        match self {
            Scale::Full => 909,
            Scale::Smoke => 101,
        }
    }

    /// Largest `d` computed for the iteration table.
    pub fn cap(self) -> usize {
        match self {
            Scale::Full => 12,
            Scale::Smoke => 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub scale: Scale,
    pub nodes: usize,
    pub inputs: usize,
    pub interp: InterpMode,
    pub clamp: ClampPolicy,
    pub workers: usize,
    pub selection: InputSelection,
}

impl ExperimentSetup {
    pub fn new(scale: Scale) -> Self {
        ExperimentSetup {
            scale,
            nodes: scale.nodes(),
            inputs: scale.inputs(),
            interp: InterpMode::Multilinear,
            clamp: ClampPolicy::ClampToBounds,
            workers: 1,
            selection: InputSelection::InterpolatedPolicy,
        }
    }

    pub fn grids(&self) -> Result<(StateGrid<f64>, InputGrid<f64>), GridError> {
        let n = self.nodes;
        Ok((
            StateGrid::new(vec![-10.0, -1000.0], vec![10.0, 1000.0], vec![n, n])?,
            InputGrid::uniform_1d(-20.0, 20.0, self.inputs)?,
        ))
    }
}

/// `V_0, …, V_cap` and the policy of every sweep, computed once and shared
/// by both tables.
pub struct ValueSequence {
    pub ctx: SweepContext<f64>,
    /// `tables[k] = V_{k-1}`; `tables[0]` is the zero table.
    pub tables: Vec<ValueTable<f64>>,
    /// `policies[d]` is the argmin table of sweep `d`.
    pub policies: Vec<Vec<u32>>,
    pub monotonicity_violations: usize,
    pub wall_ms: f64,
}

impl ValueSequence {
    pub fn compute(
        p: &CubicIntegrator<f64>,
        setup: &ExperimentSetup,
        cap: usize,
        mut progress: impl FnMut(usize, f64),
    ) -> Result<Self, EngineError> {
        let (sg, ig) = setup
            .grids()
            .map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        let ctx = SweepContext::new(p, sg, ig)?;
        let mut vi = ValueIteration::new(p, ctx.clone(), setup.interp, setup.workers)?
            .with_clamp_policy(setup.clamp);
        let mut tables = vec![ValueTable::zeros(ctx.state_grid().clone(), setup.interp)
            .with_clamp_policy(setup.clamp)];
        let mut policies = Vec::with_capacity(cap + 1);
        let mut monotonicity_violations = 0;
        let mut wall_ms = 0.0;
        for _ in 0..=cap {
            let d = vi.advance()?;
            let b = vi.current().expect("advanced");
            tables.push(b.table.clone());
            policies.push(b.policy.clone());
            monotonicity_violations += vi.last_monotonicity_violations();
            wall_ms += vi.last_wall_ms();
            progress(d, vi.last_wall_ms());
        }
        Ok(ValueSequence {
            ctx,
            tables,
            policies,
            monotonicity_violations,
            wall_ms,
        })
    }

    pub fn cap(&self) -> usize {
        self.policies.len() - 1
    }

    /// `V_d` for `d >= -1`.
    pub fn value(&self, d: isize) -> &ValueTable<f64> {
        &self.tables[(d + 1) as usize]
    }

    /// First `d <= cap` at which the criterion holds on the whole grid.
    pub fn first_stop(&self, kind: CriterionName, eps: f64) -> Option<usize> {
        let crit = crate::config::CriterionConfig::scalar(kind, eps)
            .build()
            .expect("scalar criteria are valid");
        let region = self.ctx.node_sigma().iter().cloned().fold(0.0, f64::max);
        (0..=self.cap()).find(|&d| {
            stop_check(
                &self.ctx,
                self.value(d as isize - 1).values(),
                self.value(d as isize).values(),
                &crit,
                region,
            )
            .satisfied
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Cell {
    pub criterion: &'static str,
    pub epsilon: f64,
    /// `None` when the criterion did not hold up to the cap.
    pub computed: Option<usize>,
    pub reference: usize,
    pub exact: bool,
    pub within_one: bool,
}

pub fn table1_rows() -> [(CriterionName, [usize; 7]); 3] {
    [
        (CriterionName::Uniform, TABLE1_UNIFORM),
        (CriterionName::Relative, TABLE1_RELATIVE),
        (CriterionName::MixedMin, TABLE1_MIXED),
    ]
}

pub fn table1(seq: &ValueSequence) -> Vec<Table1Cell> {
    let mut cells = Vec::with_capacity(21);
    for (kind, reference) in table1_rows() {
        for (&eps, &reference_d) in TABLE1_EPS.iter().zip(&reference) {
            let computed = seq.first_stop(kind, eps);
            cells.push(Table1Cell {
                criterion: kind.label(),
                epsilon: eps,
                computed,
                reference: reference_d,
                exact: computed == Some(reference_d),
                within_one: computed.is_some_and(|d| d.abs_diff(reference_d) <= 1),
            });
        }
    }
    cells
}

/// Consistency of a computed iteration table: every row is non-decreasing
/// as `ε` shrinks, and the mixed row dominates the other two (its
/// threshold is the smaller of theirs). `None` ranks above every `d`.
pub fn table1_invariants(cells: &[Table1Cell]) -> Vec<String> {
    let rank = |c: &Table1Cell| c.computed.unwrap_or(usize::MAX);
    let row =
        |name: &str| -> Vec<&Table1Cell> { cells.iter().filter(|c| c.criterion == name).collect() };
    let mut problems = Vec::new();
    for (kind, _) in table1_rows() {
        let r = row(kind.label());
        for w in r.windows(2) {
            if rank(w[1]) < rank(w[0]) {
                problems.push(format!(
                    "{}: d decreases from eps {} to {}",
                    kind.label(),
                    w[0].epsilon,
                    w[1].epsilon
                ));
            }
        }
    }
    let mixed = row(CriterionName::MixedMin.label());
    for other in [CriterionName::Uniform, CriterionName::Relative] {
        for (m, o) in mixed.iter().zip(row(other.label())) {
            if rank(o) > rank(m) {
                problems.push(format!(
                    "{} exceeds mixed at eps {}",
                    other.label(),
                    m.epsilon
                ));
            }
        }
    }
    problems
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Column {
    pub d: usize,
    pub v_run: f64,
    pub sigma_final: f64,
    pub reference_v_run: f64,
    pub reference_sigma: f64,
    pub v_run_rel_err: f64,
    pub v_run_ok: bool,
    /// `None` where no band applies to the final measure.
    pub sigma_ok: Option<bool>,
    pub saturated: bool,
}

impl Table2Column {
    pub fn ok(&self) -> bool {
        self.v_run_ok && self.sigma_ok.unwrap_or(true)
    }
}

/// Closed loop of horizon `d` from [`X0`] for 40 steps under the policy of
/// sweep `d` (the lookahead against `V_{d-1}`).
pub fn table2(
    p: &CubicIntegrator<f64>,
    seq: &ValueSequence,
    selection: InputSelection,
) -> Vec<Table2Column> {
    TABLE2_D
        .iter()
        .enumerate()
        .filter(|(_, &d)| d <= seq.cap())
        .map(|(i, &d)| {
            let t = policy_rollout(p, &seq.ctx, &seq.policies[d], &X0, DEFAULT_STEPS, selection);
            let v_run = running_cost_estimate(&t);
            let sigma_final = p.sigma(t.final_state());
            let rel = (v_run - TABLE2_VRUN[i]).abs() / TABLE2_VRUN[i];
            let sigma_ok = match d {
                0 => Some(sigma_final > SIGMA_UNSETTLED),
                d if d >= 3 => Some(sigma_final < SIGMA_SETTLED),
                _ => None,
            };
            Table2Column {
                d,
                v_run,
                sigma_final,
                reference_v_run: TABLE2_VRUN[i],
                reference_sigma: TABLE2_SIGMA[i],
                v_run_rel_err: rel,
                v_run_ok: rel <= VRUN_TOLERANCE,
                sigma_ok,
                saturated: t.any_saturated(),
            }
        })
        .collect()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Computed-vs-reference CSV; match columns only with `flags`.
pub fn write_table1_csv<W: Write>(
    cells: &[Table1Cell],
    flags: bool,
    w: W,
) -> Result<(), GridError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["criterion", "epsilon", "computed_d", "reference_d"];
    if flags {
        header.extend(["exact", "within_one"]);
    }
    out.write_record(&header)?;
    for c in cells {
        let mut row = vec![
            c.criterion.to_string(),
            c.epsilon.to_string(),
            c.computed.map_or("none".to_string(), |d| d.to_string()),
            c.reference.to_string(),
        ];
        if flags {
            row.extend([flag(c.exact).to_string(), flag(c.within_one).to_string()]);
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_table2_csv<W: Write>(
    cols: &[Table2Column],
    flags: bool,
    w: W,
) -> Result<(), GridError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        "d",
        "v_run",
        "sigma_final",
        "reference_v_run",
        "reference_sigma",
        "saturated",
    ];
    if flags {
        header.extend(["v_run_rel_err", "v_run_ok", "sigma_ok"]);
    }
    out.write_record(&header)?;
    for c in cols {
        let mut row = vec![
            c.d.to_string(),
            format!("{:.3}", c.v_run),
            format!("{:.6}", c.sigma_final),
            c.reference_v_run.to_string(),
            c.reference_sigma.to_string(),
            flag(c.saturated).to_string(),
        ];
        if flags {
            row.extend([
                format!("{:.4}", c.v_run_rel_err),
                flag(c.v_run_ok).to_string(),
                c.sigma_ok.map_or(String::new(), |b| flag(b).to_string()),
            ]);
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (CubicIntegrator<f64>, ValueSequence) {
        let p = CubicIntegrator::default();
        let setup = ExperimentSetup {
            nodes: 21,
            inputs: 41,
            ..ExperimentSetup::new(Scale::Smoke)
        };
        let seq = ValueSequence::compute(&p, &setup, 8, |_, _| {}).unwrap();
        (p, seq)
    }

    #[test]
    fn table_shapes_and_invariants() {
        let (p, seq) = tiny();
        assert_eq!(seq.tables.len(), 10);
        assert_eq!(seq.monotonicity_violations, 0);
        let cells = table1(&seq);
        assert_eq!(cells.len(), 21);
        assert!(
            table1_invariants(&cells).is_empty(),
            "{:?}",
            table1_invariants(&cells)
        );
        // Relative ε = 10 holds at d = 0: V_0 − 0 = min ℓ = σ <= 10 σ.
        assert_eq!(cells[7].computed, Some(0));
        let cols = table2(&p, &seq, InputSelection::InterpolatedPolicy);
        assert_eq!(cols.len(), 8);
        assert_eq!(cols[0].v_run, 40.0 * 2000.0);
        let mut buf = Vec::new();
        write_table2_csv(&cols, true, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 9);
    }

    #[test]
    fn invariants_flag_inconsistent_rows() {
        let mk = |criterion, epsilon, computed| Table1Cell {
            criterion,
            epsilon,
            computed,
            reference: 0,
            exact: false,
            within_one: false,
        };
        let cells = vec![
            mk("uniform", 1.0, Some(3)),
            mk("uniform", 0.5, Some(2)),
            mk("mixed_min", 1.0, Some(2)),
            mk("mixed_min", 0.5, None),
        ];
        assert_eq!(table1_invariants(&cells).len(), 2);
    }
}
