//! Closed-loop receding-horizon simulation, running cost and envelope
//! checks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::certificates::{decay_envelope, practical_envelope, CertificateError};
use crate::engine::{lookahead, SweepContext, ViRun};
use crate::grid::{GridError, InterpMode, ValueTable};
use crate::problem::{ControlProblem, InputBox};
use crate::scalar::Scalar;

/// Default closed-loop horizon.
pub const DEFAULT_STEPS: usize = 40;

/// How the applied input is chosen at each state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSelection {
    /// Fresh one-step lookahead at the exact state against `V_{d-1}`.
    Lookahead,
    /// Stored policy of the nearest node.
    NearestNode,
    /// Stored policy interpolated multilinearly, component by component,
    /// and clamped to the input box. The applied input is generally not an
    /// input-grid point.
    #[default]
    InterpolatedPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<T> {
    pub states: Vec<Vec<T>>,
    pub inputs: Vec<Vec<T>>,
    /// Input-grid index of each applied input; `None` for interpolated
    /// inputs.
    pub input_indices: Vec<Option<usize>>,
    pub stage_costs: Vec<T>,
    pub sigma_values: Vec<T>,
    pub running_cost_partials: Vec<T>,
    pub horizon: usize,
    /// Step `k` is flagged when `x_{k+1}` lies outside the state grid.
    pub saturation_flags: Vec<bool>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn final_state(&self) -> &[T] {
        &self.states[self.horizon]
    }

    pub fn any_saturated(&self) -> bool {
        self.saturation_flags.iter().any(|&f| f)
    }

    /// CSV with one row per state; the last row has no input.
    pub fn write_csv<W: Write, P: ControlProblem<T> + ?Sized>(
        &self,
        p: &P,
        envelope: Option<&[T]>,
        w: W,
    ) -> Result<(), GridError> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.states[0].len();
        let m = self.inputs.first().map_or(p.input_dim(), |u| u.len());
        let mut header = vec!["k".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.extend(
            [
                "stage_cost",
                "sigma",
                "cumulative_cost",
                "envelope",
                "saturated",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        out.write_record(&header)?;
        for k in 0..=self.horizon {
            let mut row = vec![k.to_string()];
            row.extend(self.states[k].iter().map(|v| v.to_string()));
            if k < self.horizon {
                row.extend(self.inputs[k].iter().map(|v| v.to_string()));
                row.push(self.stage_costs[k].to_string());
            } else {
                row.extend((0..m).map(|_| String::new()));
                row.push(String::new());
            }
            row.push(p.sigma(&self.states[k]).to_string());
            row.push(if k == 0 {
                T::zero().to_string()
            } else {
                self.running_cost_partials[k - 1].to_string()
            });
            row.push(
                envelope
                    .and_then(|e| e.get(k))
                    .map_or(String::new(), |v| v.to_string()),
            );
            row.push(if k < self.horizon {
                (self.saturation_flags[k] as u8).to_string()
            } else {
                String::new()
            });
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Applies the stopped run's receding-horizon law for `steps` steps from
/// `x0`. States are never clamped; leaving the grid is only flagged.
pub fn closed_loop<T: Scalar, P: ControlProblem<T> + ?Sized>(
    run: &ViRun<T>,
    p: &P,
    x0: &[T],
    steps: usize,
    selection: InputSelection,
) -> Trajectory<T> {
    match selection {
        InputSelection::Lookahead => rollout(p, &run.ctx, &run.v_prev, x0, steps),
        InputSelection::NearestNode => simulate_with(p, &run.ctx, x0, steps, |x| {
            let index = run.policy[run.v_curr.nearest_node(x).0] as usize;
            (run.ctx.input(index).to_vec(), Some(index))
        }),
        InputSelection::InterpolatedPolicy => {
            let law = PolicyInterpolant::new(p, &run.ctx, &run.policy);
            simulate_with(p, &run.ctx, x0, steps, |x| (law.input(x), None))
        }
    }
}

/// Closed loop whose input at each state is the one-step lookahead against
/// `prev`, i.e. the receding-horizon law of horizon `d` when `prev = V_{d-1}`.
pub fn rollout<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    ctx: &SweepContext<T>,
    prev: &ValueTable<T>,
    x0: &[T],
    steps: usize,
) -> Trajectory<T> {
    simulate_with(p, ctx, x0, steps, |x| {
        let index = lookahead(p, ctx, prev, x).input;
        (ctx.input(index).to_vec(), Some(index))
    })
}

/// Closed loop under a stored policy table (input indices per node).
pub fn policy_rollout<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    ctx: &SweepContext<T>,
    policy: &[u32],
    x0: &[T],
    steps: usize,
    selection: InputSelection,
) -> Trajectory<T> {
    match selection {
        InputSelection::InterpolatedPolicy => {
            let law = PolicyInterpolant::new(p, ctx, policy);
            simulate_with(p, ctx, x0, steps, |x| (law.input(x), None))
        }
        _ => {
            let probe = ValueTable::zeros(ctx.state_grid().clone(), InterpMode::NearestNeighbor);
            simulate_with(p, ctx, x0, steps, |x| {
                let index = policy[probe.nearest_node(x).0] as usize;
                (ctx.input(index).to_vec(), Some(index))
            })
        }
    }
}

/// Multilinear interpolant of a policy table, one table per input
/// component, offset so the stored values are non-negative.
struct PolicyInterpolant<'a, T> {
    tables: Vec<ValueTable<T>>,
    offsets: Vec<T>,
    bounds: &'a InputBox<T>,
}

impl<'a, T: Scalar> PolicyInterpolant<'a, T> {
    fn new<P: ControlProblem<T> + ?Sized>(p: &'a P, ctx: &SweepContext<T>, policy: &[u32]) -> Self {
        let bounds = p.input_box();
        let m = ctx.input_grid().dim();
        let mut tables = Vec::with_capacity(m);
        let mut offsets = Vec::with_capacity(m);
        for j in 0..m {
            let offset = ctx.input_grid().lower()[j];
            let values = policy
                .iter()
                .map(|&i| ctx.input(i as usize)[j] - offset)
                .collect();
            tables.push(ValueTable::from_values_unchecked(
                ctx.state_grid().clone(),
                values,
                InterpMode::Multilinear,
            ));
            offsets.push(offset);
        }
        PolicyInterpolant {
            tables,
            offsets,
            bounds,
        }
    }

    fn input(&self, x: &[T]) -> Vec<T> {
        self.tables
            .iter()
            .zip(&self.offsets)
            .enumerate()
            .map(|(j, (t, &o))| {
                (t.value_at(x) + o)
                    .max(self.bounds.lower[j])
                    .min(self.bounds.upper[j])
            })
            .collect()
    }
}

fn simulate_with<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    ctx: &SweepContext<T>,
    x0: &[T],
    steps: usize,
    mut choose: impl FnMut(&[T]) -> (Vec<T>, Option<usize>),
) -> Trajectory<T> {
    let grid = ctx.state_grid();
    let mut t = Trajectory {
        states: vec![x0.to_vec()],
        inputs: Vec::with_capacity(steps),
        input_indices: Vec::with_capacity(steps),
        stage_costs: Vec::with_capacity(steps),
        sigma_values: Vec::with_capacity(steps),
        running_cost_partials: Vec::with_capacity(steps),
        horizon: steps,
        saturation_flags: Vec::with_capacity(steps),
    };
    let mut total = T::zero();
    for k in 0..steps {
        let x = t.states[k].clone();
        let (u, index) = choose(&x);
        let mut next = vec![T::zero(); x.len()];
        p.step_into(&x, &u, &mut next);
        let cost = p.stage_cost(&x, &u);
        total = total + cost;
        t.sigma_values.push(p.sigma(&x));
        t.stage_costs.push(cost);
        t.running_cost_partials.push(total);
        t.saturation_flags.push(!grid.contains(&next));
        t.inputs.push(u);
        t.input_indices.push(index);
        t.states.push(next);
    }
    t
}

/// Truncated running cost `Σ_{k<K} ℓ(x_k, u_k)`.
pub fn running_cost_estimate<T: Scalar>(t: &Trajectory<T>) -> T {
    t.stage_costs.iter().fold(T::zero(), |a, &c| a + c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EnvelopeKind {
    /// Exponential envelope `(ā_V/a_W) base^k σ₀`.
    Exponential { eps_norm: f64 },
    /// Iterate-form practical envelope; the exponential claim was refused.
    Practical { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub kind: EnvelopeKind,
    pub envelope: Vec<f64>,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// Steps with `σ(k) > envelope(k) + grid_slack`.
    pub violations: Vec<usize>,
    /// Smallest `δ` with `σ(k) <= max{envelope(k), δ}` for every `k`.
    pub practical_delta: f64,
}

impl EnvelopeReport {
    pub fn contained(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compares the trajectory's measures against the stability envelope.
/// The exponential envelope is used only when `exponential_allowed` and
/// `eps_norm < ε*`; otherwise only the practical envelope is reported.
pub fn envelope_check<T: Scalar, P: ControlProblem<T> + ?Sized>(
    t: &Trajectory<T>,
    p: &P,
    eps_norm: T,
    exponential_allowed: bool,
    grid_slack: T,
) -> Result<EnvelopeReport, CertificateError> {
    let sigma0 = p.sigma(&t.states[0]);
    let exponential = if exponential_allowed {
        decay_envelope(p, eps_norm, sigma0, 0).map(|_| ())
    } else {
        Err(CertificateError::Inapplicable(
            "criterion is not bounded by |eps| sigma(x)".into(),
        ))
    };
    let kind = match &exponential {
        Ok(()) => EnvelopeKind::Exponential {
            eps_norm: eps_norm.to_f64_lossy(),
        },
        Err(e) => EnvelopeKind::Practical {
            reason: e.to_string(),
        },
    };
    let mut envelope = Vec::with_capacity(t.horizon + 1);
    let mut ratios = Vec::with_capacity(t.horizon + 1);
    let mut violations = Vec::new();
    let mut practical_delta = 0.0f64;
    for k in 0..=t.horizon {
        let env = match exponential {
            Ok(()) => decay_envelope(p, eps_norm, sigma0, k)?,
            Err(_) => practical_envelope(p, sigma0, k)?,
        };
        let s = p.sigma(&t.states[k]);
        let ratio = if env > T::zero() {
            (s / env).to_f64_lossy()
        } else if s > T::zero() {
            f64::INFINITY
        } else {
            0.0
        };
        if s > env + grid_slack {
            violations.push(k);
        }
        if s > env {
            practical_delta = practical_delta.max(s.to_f64_lossy());
        }
        envelope.push(env.to_f64_lossy());
        ratios.push(ratio);
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(EnvelopeReport {
        kind,
        envelope,
        ratios,
        max_ratio,
        violations,
        practical_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_until_stop, RunOptions, StoppingCriterion};
    use crate::grid::{InputGrid, StateGrid};
    use crate::problem::CubicIntegrator;

    fn small_run(crit: StoppingCriterion<f64>) -> (CubicIntegrator<f64>, ViRun<f64>) {
        let p = CubicIntegrator::default();
        let sg = StateGrid::new(vec![-10.0, -1000.0], vec![10.0, 1000.0], vec![41, 41]).unwrap();
        let ig = InputGrid::uniform_1d(-20.0, 20.0, 81).unwrap();
        let run = run_until_stop(&p, sg, ig, crit, &RunOptions::default()).unwrap();
        (p, run)
    }

    #[test]
    fn origin_is_invariant() {
        let (p, run) = small_run(StoppingCriterion::relative(0.01));
        let t = closed_loop(&run, &p, &[0.0, 0.0], 10, InputSelection::Lookahead);
        assert!(t.states.iter().all(|x| x == &[0.0, 0.0]));
        assert_eq!(running_cost_estimate(&t), 0.0);
        let r = envelope_check(&t, &p, 0.01, true, 0.0).unwrap();
        assert_eq!(r.max_ratio, 0.0);
    }

    #[test]
    fn shapes_and_partials() {
        let (p, run) = small_run(StoppingCriterion::relative(0.01));
        let t = closed_loop(&run, &p, &[10.0, -1000.0], 40, InputSelection::Lookahead);
        assert_eq!(t.states.len(), 41);
        assert_eq!(t.inputs.len(), 40);
        assert!(t.running_cost_partials.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(
            *t.running_cost_partials.last().unwrap(),
            running_cost_estimate(&t)
        );
        let mut buf = Vec::new();
        t.write_csv(&p, None, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 42);
    }

    #[test]
    fn uniform_criterion_refuses_exponential_claim() {
        let (p, run) = small_run(StoppingCriterion::uniform(0.01));
        let t = closed_loop(&run, &p, &[10.0, -1000.0], 5, InputSelection::Lookahead);
        let r = envelope_check(&t, &p, 0.01, false, 0.0).unwrap();
        assert!(matches!(r.kind, EnvelopeKind::Practical { .. }));
        let r = envelope_check(&t, &p, 0.5, true, 0.0).unwrap();
        assert!(matches!(r.kind, EnvelopeKind::Practical { .. }));
    }
}
