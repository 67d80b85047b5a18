//! Bellman backups over a state grid and the stop-on-criterion outer loop.
//!
//! Starting from `V₋₁ = 0`, iteration `d` computes
//! `V_d(x) = min_u ℓ(x, u) + V_{d-1}(f(x, u))` at every node and stops at
//! the first `d` with `V_d(x) - V_{d-1}(x) <= c_stop(ε, x)` on every node of
//! the check region `{σ <= Δ}`.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{ComparisonError, MonotoneFn};
use crate::grid::{ClampPolicy, InputGrid, InterpMode, StateGrid, ValueTable};
use crate::problem::ControlProblem;
use crate::scalar::Scalar;

/// Safety cap on the number of backups.
pub const DEFAULT_D_MAX: usize = 200;

const SWEEP_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("non-finite cost at node {node} (state {state:?}, input index {input})")]
    NonFinite {
        node: usize,
        state: Vec<f64>,
        input: usize,
    },
    #[error("no input keeps the successor of node {node} inside the grid")]
    NoFeasibleInput { node: usize },
    #[error("invalid stopping criterion: {0}")]
    InvalidCriterion(String),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("problem/grid mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// User-supplied stopping function `(ε, x, σ(x)) -> c_stop`.
#[derive(Clone)]
pub struct CustomStop<T>(pub Arc<dyn Fn(&[T], &[T], T) -> T + Send + Sync>);

impl<T> fmt::Debug for CustomStop<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomStop(..)")
    }
}

#[derive(Debug, Clone)]
pub enum CriterionKind<T> {
    /// `|ε|`
    Uniform,
    /// `|ε| σ(x)`
    Relative,
    /// `|ε| min{σ(x), 1}`
    MixedMin,
    /// `max{|ε₁|, |ε₂| σ(x)}`
    MaxOfUniformRelative,
    /// `|ε| xᵀ W x` with `W` symmetric positive definite (row-major).
    QuadraticForm {
        weights: Vec<T>,
    },
    Custom(CustomStop<T>),
}

impl<T> CriterionKind<T> {
    pub fn label(&self) -> &'static str {
        match self {
            CriterionKind::Uniform => "uniform",
            CriterionKind::Relative => "relative",
            CriterionKind::MixedMin => "mixed_min",
            CriterionKind::MaxOfUniformRelative => "max_uniform_relative",
            CriterionKind::QuadraticForm { .. } => "quadratic_form",
            CriterionKind::Custom(_) => "custom",
        }
    }
}

/// Factor of `θ(e, s) = g(e) · h(s)` that depends on the measure `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum SigmaFactor<T> {
    Constant {
        value: T,
    },
    Fn {
        f: MonotoneFn<T>,
    },
    /// `min{f(s), cap}`
    Capped {
        f: MonotoneFn<T>,
        cap: T,
    },
    /// `max{f(s), floor}`
    Floored {
        f: MonotoneFn<T>,
        floor: T,
    },
}

impl<T: Scalar> SigmaFactor<T> {
    pub fn evaluate(&self, s: T) -> Result<T, ComparisonError> {
        Ok(match self {
            SigmaFactor::Constant { value } => *value,
            SigmaFactor::Fn { f } => f.evaluate(s)?,
            SigmaFactor::Capped { f, cap } => f.evaluate(s)?.min(*cap),
            SigmaFactor::Floored { f, floor } => f.evaluate(s)?.max(*floor),
        })
    }
}

/// Majorant `c_stop(ε, x) <= θ(|ε|, σ(x))` with `θ(·, s)` of class K and
/// `θ(e, ·)` non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ThetaMajorant<T> {
    pub eps_gain: MonotoneFn<T>,
    pub sigma_factor: SigmaFactor<T>,
}

impl<T: Scalar> ThetaMajorant<T> {
    pub fn evaluate(&self, eps_norm: T, sigma: T) -> Result<T, ComparisonError> {
        Ok(self.eps_gain.evaluate(eps_norm)? * self.sigma_factor.evaluate(sigma)?)
    }
}

/// Lower bound on `c_stop` used to classify the criterion.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopFloor<T> {
    /// `c_stop(ε, x) >= floor` everywhere.
    Constant { floor: T },
    /// `c_stop(ε, x) >= rate · σ(x)`, possibly only for `σ <= valid_up_to`.
    /// For quadratic forms the rate is with respect to `|x|²`.
    Linear { rate: T, valid_up_to: Option<T> },
}

#[derive(Debug, Clone)]
pub struct StoppingCriterion<T> {
    kind: CriterionKind<T>,
    epsilon: Vec<T>,
    theta: Option<ThetaMajorant<T>>,
    /// Smallest eigenvalue of `W` for quadratic forms.
    quad_min_eig: Option<T>,
}

impl<T: Scalar> StoppingCriterion<T> {
    pub fn new(kind: CriterionKind<T>, epsilon: Vec<T>) -> Result<Self, EngineError> {
        let bad = |m: String| Err(EngineError::InvalidCriterion(m));
        if epsilon.is_empty() || epsilon.iter().any(|e| !e.is_finite()) {
            return bad("epsilon must be a non-empty vector of finite reals".into());
        }
        if matches!(kind, CriterionKind::MaxOfUniformRelative) && epsilon.len() != 2 {
            return bad("max_uniform_relative needs epsilon = [e1, e2]".into());
        }
        let quad_min_eig = match &kind {
            CriterionKind::QuadraticForm { weights } => Some(min_symmetric_eigenvalue(weights)?),
            _ => None,
        };
        let mut c = StoppingCriterion {
            kind,
            epsilon,
            theta: None,
            quad_min_eig,
        };
        c.theta = c.default_majorant();
        Ok(c)
    }

    pub fn uniform(eps: T) -> Self {
        Self::new(CriterionKind::Uniform, vec![eps]).expect("scalar epsilon")
    }

    pub fn relative(eps: T) -> Self {
        Self::new(CriterionKind::Relative, vec![eps]).expect("scalar epsilon")
    }

    pub fn mixed_min(eps: T) -> Self {
        Self::new(CriterionKind::MixedMin, vec![eps]).expect("scalar epsilon")
    }

    pub fn with_majorant(mut self, theta: Option<ThetaMajorant<T>>) -> Self {
        self.theta = theta;
        self
    }

    pub fn kind(&self) -> &CriterionKind<T> {
        &self.kind
    }

    pub fn epsilon(&self) -> &[T] {
        &self.epsilon
    }

    pub fn majorant(&self) -> Option<&ThetaMajorant<T>> {
        self.theta.as_ref()
    }

    /// Euclidean norm `|ε|`.
    pub fn eps_norm(&self) -> T {
        self.epsilon
            .iter()
            .fold(T::zero(), |a, &e| a + e * e)
            .sqrt()
    }

    /// `c_stop(ε, x)` given the state and its measure.
    #[inline]
    pub fn c_stop(&self, x: &[T], sigma: T) -> T {
        let e = self.eps_norm();
        match &self.kind {
            CriterionKind::Uniform => e,
            CriterionKind::Relative => e * sigma,
            CriterionKind::MixedMin => e * sigma.min(T::one()),
            CriterionKind::MaxOfUniformRelative => {
                self.epsilon[0].abs().max(self.epsilon[1].abs() * sigma)
            }
            CriterionKind::QuadraticForm { weights } => {
                let n = x.len();
                let mut q = T::zero();
                for i in 0..n {
                    for j in 0..n {
                        q = q + x[i] * weights[i * n + j] * x[j];
                    }
                }
                e * q
            }
            CriterionKind::Custom(f) => (f.0)(&self.epsilon, x, sigma),
        }
    }

    /// Floor classification. `region_bound` is the `Δ` of the check region;
    /// the mixed criterion only has a linear floor on bounded regions.
    pub fn floor(&self, region_bound: Option<T>) -> Option<StopFloor<T>> {
        let e = self.eps_norm();
        match &self.kind {
            CriterionKind::Uniform => Some(StopFloor::Constant { floor: e }),
            CriterionKind::MaxOfUniformRelative => Some(StopFloor::Constant {
                floor: self.epsilon[0].abs(),
            }),
            CriterionKind::Relative => Some(StopFloor::Linear {
                rate: e,
                valid_up_to: None,
            }),
            CriterionKind::MixedMin => Some(match region_bound {
                Some(delta) if delta > T::one() => StopFloor::Linear {
                    rate: e / delta,
                    valid_up_to: Some(delta),
                },
                _ => StopFloor::Linear {
                    rate: e,
                    valid_up_to: Some(T::one()),
                },
            }),
            CriterionKind::QuadraticForm { .. } => Some(StopFloor::Linear {
                rate: e * self.quad_min_eig.unwrap_or(T::zero()),
                valid_up_to: None,
            }),
            CriterionKind::Custom(_) => None,
        }
    }

    /// Whether `c_stop(ε, x) <= |ε| σ(x)` holds identically, the hypothesis of
    /// the exponential-stability and running-cost certificates.
    pub fn bounded_by_relative(&self) -> bool {
        matches!(self.kind, CriterionKind::Relative | CriterionKind::MixedMin)
    }

    fn default_majorant(&self) -> Option<ThetaMajorant<T>> {
        let factor = match &self.kind {
            CriterionKind::Uniform => SigmaFactor::Constant { value: T::one() },
            CriterionKind::Relative => SigmaFactor::Fn {
                f: MonotoneFn::identity(),
            },
            CriterionKind::MixedMin => SigmaFactor::Capped {
                f: MonotoneFn::identity(),
                cap: T::one(),
            },
            CriterionKind::MaxOfUniformRelative => SigmaFactor::Floored {
                f: MonotoneFn::identity(),
                floor: T::one(),
            },
            CriterionKind::QuadraticForm { .. } | CriterionKind::Custom(_) => return None,
        };
        Some(ThetaMajorant {
            eps_gain: MonotoneFn::identity(),
            sigma_factor: factor,
        })
    }

    /// Checks `c_stop(ε, x) <= θ(|ε|, σ(x))` on the given states and returns
    /// the offending ones.
    pub fn majorant_violations<P: ControlProblem<T> + ?Sized>(
        &self,
        p: &P,
        states: &[Vec<T>],
    ) -> Result<Vec<usize>, EngineError> {
        let theta = self
            .theta
            .as_ref()
            .ok_or_else(|| EngineError::InvalidCriterion("no majorant".into()))?;
        let e = self.eps_norm();
        let mut bad = Vec::new();
        for (i, x) in states.iter().enumerate() {
            let s = p.sigma(x);
            let c = self.c_stop(x, s);
            if c < T::zero() || c > theta.evaluate(e, s)? {
                bad.push(i);
            }
        }
        Ok(bad)
    }
}

fn min_symmetric_eigenvalue<T: Scalar>(weights: &[T]) -> Result<T, EngineError> {
    let n = (weights.len() as f64).sqrt().round() as usize;
    if n == 0 || n * n != weights.len() {
        return Err(EngineError::InvalidCriterion(
            "quadratic form weights must be a square matrix".into(),
        ));
    }
    let m = DMatrix::from_row_slice(
        n,
        n,
        &weights.iter().map(|w| w.to_f64_lossy()).collect::<Vec<_>>(),
    );
    if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(EngineError::InvalidCriterion(
            "quadratic form weights must be symmetric".into(),
        ));
    }
    let min = SymmetricEigen::new(m).eigenvalues.min();
    if !(min > 0.0) {
        return Err(EngineError::InvalidCriterion(format!(
            "quadratic form weights must be positive definite (min eigenvalue {min})"
        )));
    }
    Ok(T::lit(min))
}

/// Result of one backup sweep.
#[derive(Debug, Clone)]
pub struct Backup<T> {
    pub table: ValueTable<T>,
    /// Minimizing input index per node (lowest index on ties).
    pub policy: Vec<u32>,
    /// Candidates whose successor left the grid and was clamped.
    pub clamped_candidates: u64,
    /// Nodes whose minimizing successor was clamped.
    pub clamped_argmin_nodes: u64,
}

/// Precomputed node coordinates, measures and candidate inputs for a grid
/// pair; shared read-only by every sweep.
#[derive(Debug, Clone)]
pub struct SweepContext<T> {
    state_grid: StateGrid<T>,
    input_grid: InputGrid<T>,
    node_states: Vec<T>,
    node_sigma: Vec<T>,
    inputs: Vec<T>,
}

impl<T: Scalar> SweepContext<T> {
    pub fn new<P: ControlProblem<T> + ?Sized>(
        p: &P,
        state_grid: StateGrid<T>,
        input_grid: InputGrid<T>,
    ) -> Result<Self, EngineError> {
        if state_grid.dim() != p.state_dim() {
            return Err(EngineError::Mismatch(format!(
                "state grid has dimension {}, problem {}",
                state_grid.dim(),
                p.state_dim()
            )));
        }
        if input_grid.dim() != p.input_dim() {
            return Err(EngineError::Mismatch(format!(
                "input grid has dimension {}, problem {}",
                input_grid.dim(),
                p.input_dim()
            )));
        }
        let inputs = input_grid.points_flat();
        let bx = p.input_box();
        if let Some(u) = inputs.chunks(p.input_dim()).find(|u| !bx.contains(u)) {
            return Err(EngineError::Mismatch(format!(
                "quantized input {:?} lies outside the admissible set",
                u.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()
            )));
        }
        let node_states = state_grid.points_flat();
        let node_sigma = node_states
            .chunks(p.state_dim())
            .map(|x| p.sigma(x))
            .collect();
        Ok(SweepContext {
            state_grid,
            input_grid,
            node_states,
            node_sigma,
            inputs,
        })
    }

    pub fn state_grid(&self) -> &StateGrid<T> {
        &self.state_grid
    }

    pub fn input_grid(&self) -> &InputGrid<T> {
        &self.input_grid
    }

    pub fn node_sigma(&self) -> &[T] {
        &self.node_sigma
    }

    pub fn node_state(&self, node: usize) -> &[T] {
        let n = self.state_grid.dim();
        &self.node_states[node * n..(node + 1) * n]
    }

    pub fn input(&self, index: usize) -> &[T] {
        let m = self.input_grid.dim();
        &self.inputs[index * m..(index + 1) * m]
    }

    pub fn input_count(&self) -> usize {
        self.input_grid.len()
    }
}

/// Best input for `ℓ(x, u) + prev(f(x, u))` over all quantized inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookahead<T> {
    pub value: T,
    pub input: usize,
    pub clamped: bool,
}

/// One-step lookahead at an arbitrary state against `prev`; ties go to the
/// lowest input index. Under [`ClampPolicy::ExcludeOutside`] inputs leading
/// outside the grid are skipped unless no input stays inside.
pub fn lookahead<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    ctx: &SweepContext<T>,
    prev: &ValueTable<T>,
    x: &[T],
) -> Lookahead<T> {
    let m = ctx.input_grid.dim();
    let mut next = [T::zero(); crate::grid::MAX_DIM];
    let next = &mut next[..ctx.state_grid.dim()];
    let exclude = prev.clamp_policy() == ClampPolicy::ExcludeOutside;
    let none = Lookahead {
        value: T::infinity(),
        input: 0,
        clamped: false,
    };
    let (mut best, mut best_any) = (none, none);
    for (k, u) in ctx.inputs.chunks_exact(m).enumerate() {
        p.step_into(x, u, next);
        let (v, clamped) = prev.value_at_flagged(next);
        let total = p.stage_cost(x, u) + v;
        let cand = Lookahead {
            value: total,
            input: k,
            clamped,
        };
        if total < best_any.value {
            best_any = cand;
        }
        if !(exclude && clamped) && total < best.value {
            best = cand;
        }
    }
    if best.value.is_finite() {
        best
    } else {
        best_any
    }
}

/// `next(x) = min_u ℓ(x, u) + prev(f(x, u))` at every node.
pub fn bellman_backup<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    ctx: &SweepContext<T>,
    prev: &ValueTable<T>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Backup<T>, EngineError> {
    let len = ctx.state_grid.len();
    let n = ctx.state_grid.dim();
    let m = ctx.input_grid.dim();
    let mut values = vec![T::zero(); len];
    let mut policy = vec![0u32; len];
    let exclude = prev.clamp_policy() == ClampPolicy::ExcludeOutside;

    let sweep_chunk =
        |(chunk, (vals, pol)): (usize, (&mut [T], &mut [u32]))| -> Result<(u64, u64), EngineError> {
            let mut next = [T::zero(); crate::grid::MAX_DIM];
            let next = &mut next[..n];
            let (mut clamped_total, mut clamped_best) = (0u64, 0u64);
            for (off, (val, pol)) in vals.iter_mut().zip(pol.iter_mut()).enumerate() {
                let node = chunk * SWEEP_CHUNK + off;
                let x = &ctx.node_states[node * n..(node + 1) * n];
                let mut best = T::infinity();
                let mut best_k = 0usize;
                let mut best_clamped = false;
                for (k, u) in ctx.inputs.chunks_exact(m).enumerate() {
                    p.step_into(x, u, next);
                    let (v, clamped) = prev.value_at_flagged(next);
                    let total = p.stage_cost(x, u) + v;
                    clamped_total += clamped as u64;
                    if !total.is_finite() {
                        return Err(EngineError::NonFinite {
                            node,
                            state: x.iter().map(|c| c.to_f64_lossy()).collect(),
                            input: k,
                        });
                    }
                    if total < best && !(exclude && clamped) {
                        best = total;
                        best_k = k;
                        best_clamped = clamped;
                    }
                }
                if best == T::infinity() {
                    return Err(EngineError::NoFeasibleInput { node });
                }
                *val = best;
                *pol = best_k as u32;
                clamped_best += best_clamped as u64;
            }
            Ok((clamped_total, clamped_best))
        };

    let results: Vec<Result<(u64, u64), EngineError>> = match pool {
        Some(pool) => pool.install(|| {
            values
                .par_chunks_mut(SWEEP_CHUNK)
                .zip(policy.par_chunks_mut(SWEEP_CHUNK))
                .enumerate()
                .map(sweep_chunk)
                .collect()
        }),
        None => values
            .chunks_mut(SWEEP_CHUNK)
            .zip(policy.chunks_mut(SWEEP_CHUNK))
            .enumerate()
            .map(sweep_chunk)
            .collect(),
    };
    let (mut clamped_candidates, mut clamped_argmin_nodes) = (0, 0);
    for r in results {
        let (a, b) = r?;
        clamped_candidates += a;
        clamped_argmin_nodes += b;
    }
    Ok(Backup {
        table: ValueTable::from_values_unchecked(ctx.state_grid.clone(), values, prev.interp())
            .with_clamp_policy(prev.clamp_policy()),
        policy,
        clamped_candidates,
        clamped_argmin_nodes,
    })
}

/// Outcome of evaluating the stopping rule on a pair of consecutive tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopCheck<T> {
    pub satisfied: bool,
    /// Node maximizing `gap - c_stop` over the check region.
    pub worst_node: usize,
    pub worst_excess: T,
    pub max_gap: T,
    pub max_gap_node: usize,
    pub nodes_checked: usize,
    pub nodes_violating: usize,
}

/// Evaluates `V_d - V_{d-1} <= c_stop` on every node with `σ <= region_bound`.
pub fn stop_check<T: Scalar>(
    ctx: &SweepContext<T>,
    prev: &[T],
    curr: &[T],
    criterion: &StoppingCriterion<T>,
    region_bound: T,
) -> StopCheck<T> {
    let n = ctx.state_grid.dim();
    let mut out = StopCheck {
        satisfied: true,
        worst_node: 0,
        worst_excess: T::neg_infinity(),
        max_gap: T::neg_infinity(),
        max_gap_node: 0,
        nodes_checked: 0,
        nodes_violating: 0,
    };
    for node in 0..curr.len() {
        let sigma = ctx.node_sigma[node];
        if sigma > region_bound {
            continue;
        }
        out.nodes_checked += 1;
        let gap = curr[node] - prev[node];
        let c = criterion.c_stop(&ctx.node_states[node * n..(node + 1) * n], sigma);
        let excess = gap - c;
        if excess > out.worst_excess {
            out.worst_excess = excess;
            out.worst_node = node;
        }
        if gap > out.max_gap {
            out.max_gap = gap;
            out.max_gap_node = node;
        }
        if gap > c {
            out.satisfied = false;
            out.nodes_violating += 1;
        }
    }
    out
}

/// Per-iteration progress record, emitted as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub d: usize,
    pub max_gap: f64,
    pub max_gap_node: usize,
    pub worst_node: usize,
    pub worst_excess: f64,
    pub satisfied: bool,
    pub nodes_violating: usize,
    pub clamped_candidates: u64,
    pub clamped_argmin_nodes: u64,
    /// Nodes with `V_d < V_{d-1}`; zero for a correct sweep.
    pub monotonicity_violations: usize,
    pub wall_ms: f64,
}

impl IterationRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    /// Copy with the wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        IterationRecord {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Stopped,
    NotTerminated,
}

#[derive(Debug, Clone)]
pub struct RunOptions<T> {
    /// Check region `{σ <= Δ}`; `None` uses the largest node measure.
    pub region_bound: Option<T>,
    pub d_max: usize,
    pub workers: usize,
    pub interp: InterpMode,
    pub clamp: ClampPolicy,
    /// Keep every `V_d`, needed for rollouts along the d-horizon policy.
    pub keep_history: bool,
}

impl<T> Default for RunOptions<T> {
    fn default() -> Self {
        RunOptions {
            region_bound: None,
            d_max: DEFAULT_D_MAX,
            workers: 1,
            interp: InterpMode::Multilinear,
            clamp: ClampPolicy::ClampToBounds,
            keep_history: false,
        }
    }
}

/// State of a finished (or capped) value-iteration run.
#[derive(Debug, Clone)]
pub struct ViRun<T> {
    pub problem_name: String,
    pub ctx: SweepContext<T>,
    pub criterion: StoppingCriterion<T>,
    pub region_bound: T,
    pub d_max: usize,
    /// Index of the last completed backup.
    pub d: usize,
    pub status: RunStatus,
    pub v_prev: ValueTable<T>,
    pub v_curr: ValueTable<T>,
    pub gap: Vec<T>,
    pub stop_mask: Vec<bool>,
    pub policy: Vec<u32>,
    pub history: Vec<IterationRecord>,
    /// `V_0..=V_d` when requested.
    pub tables: Vec<ValueTable<T>>,
}

impl<T: Scalar> ViRun<T> {
    pub fn stopped(&self) -> bool {
        self.status == RunStatus::Stopped
    }

    /// `V_k`, with `V₋₁ = 0` for `k = -1`. Requires history.
    pub fn table(&self, k: isize) -> Option<ValueTable<T>> {
        if k < 0 {
            return Some(
                ValueTable::zeros(self.ctx.state_grid.clone(), self.v_curr.interp())
                    .with_clamp_policy(self.v_curr.clamp_policy()),
            );
        }
        self.tables.get(k as usize).cloned()
    }

    pub fn interp(&self) -> InterpMode {
        self.v_curr.interp()
    }
}

/// Stateful driver: call [`advance`](Self::advance) to perform the next
/// backup. Used directly when several criteria are evaluated on one
/// sequence of tables.
pub struct ValueIteration<'p, T, P: ?Sized> {
    problem: &'p P,
    ctx: SweepContext<T>,
    pool: Option<rayon::ThreadPool>,
    prev: ValueTable<T>,
    curr: Option<Backup<T>>,
    d: Option<usize>,
    last_ms: f64,
    monotonicity_violations: usize,
}

impl<'p, T: Scalar, P: ControlProblem<T> + ?Sized> ValueIteration<'p, T, P> {
    pub fn new(
        problem: &'p P,
        ctx: SweepContext<T>,
        interp: InterpMode,
        workers: usize,
    ) -> Result<Self, EngineError> {
        if workers == 0 {
            return Err(EngineError::InvalidConfig(
                "worker count must be at least 1".into(),
            ));
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| EngineError::ThreadPool(e.to_string()))?,
            )
        } else {
            None
        };
        let prev = ValueTable::zeros(ctx.state_grid.clone(), interp);
        Ok(ValueIteration {
            problem,
            ctx,
            pool,
            prev,
            curr: None,
            d: None,
            last_ms: 0.0,
            monotonicity_violations: 0,
        })
    }

    /// Rule for successors leaving the grid; must be set before the first
    /// backup.
    pub fn with_clamp_policy(mut self, clamp: ClampPolicy) -> Self {
        self.prev = self.prev.with_clamp_policy(clamp);
        self
    }

    pub fn context(&self) -> &SweepContext<T> {
        &self.ctx
    }

    /// Index of the last completed backup.
    pub fn d(&self) -> Option<usize> {
        self.d
    }

    /// `V_{d-1}` (zero before the second backup).
    pub fn previous(&self) -> &ValueTable<T> {
        &self.prev
    }

    pub fn current(&self) -> Option<&Backup<T>> {
        self.curr.as_ref()
    }

    pub fn last_wall_ms(&self) -> f64 {
        self.last_ms
    }

    pub fn last_monotonicity_violations(&self) -> usize {
        self.monotonicity_violations
    }

    /// Performs backup `d + 1` (or `0` on the first call) and returns its
    /// index.
    pub fn advance(&mut self) -> Result<usize, EngineError> {
        let start = Instant::now();
        let base = match &self.curr {
            Some(b) => &b.table,
            None => &self.prev,
        };
        let next = bellman_backup(self.problem, &self.ctx, base, self.pool.as_ref())?;
        self.monotonicity_violations = next
            .table
            .values()
            .iter()
            .zip(base.values())
            .filter(|(a, b)| a < b)
            .count();
        if let Some(old) = self.curr.take() {
            self.prev = old.table;
        }
        self.curr = Some(next);
        let d = self.d.map_or(0, |d| d + 1);
        self.d = Some(d);
        self.last_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(d)
    }
}

/// Runs backups `d = 0, 1, ...` until the stopping rule holds on the check
/// region or `d = d_max`. Reaching the cap is reported through
/// [`RunStatus::NotTerminated`], not as an error.
pub fn run_until_stop<T: Scalar, P: ControlProblem<T> + ?Sized>(
    problem: &P,
    state_grid: StateGrid<T>,
    input_grid: InputGrid<T>,
    criterion: StoppingCriterion<T>,
    options: &RunOptions<T>,
) -> Result<ViRun<T>, EngineError> {
    run_until_stop_observed(problem, state_grid, input_grid, criterion, options, |_| {})
}

/// [`run_until_stop`] with a callback receiving each progress record.
pub fn run_until_stop_observed<T: Scalar, P: ControlProblem<T> + ?Sized>(
    problem: &P,
    state_grid: StateGrid<T>,
    input_grid: InputGrid<T>,
    criterion: StoppingCriterion<T>,
    options: &RunOptions<T>,
    observer: impl FnMut(&IterationRecord),
) -> Result<ViRun<T>, EngineError> {
    drive(
        problem, state_grid, input_grid, criterion, options, None, observer,
    )
}

/// Performs exactly the backups `0..=d` regardless of the stopping rule,
/// keeping every table. The status still reports whether the rule holds at
/// `d`.
pub fn run_fixed_horizon<T: Scalar, P: ControlProblem<T> + ?Sized>(
    problem: &P,
    state_grid: StateGrid<T>,
    input_grid: InputGrid<T>,
    criterion: StoppingCriterion<T>,
    d: usize,
    options: &RunOptions<T>,
) -> Result<ViRun<T>, EngineError> {
    let options = RunOptions {
        d_max: d.max(1),
        keep_history: true,
        ..options.clone()
    };
    drive(
        problem,
        state_grid,
        input_grid,
        criterion,
        &options,
        Some(d),
        |_| {},
    )
}

fn drive<T: Scalar, P: ControlProblem<T> + ?Sized>(
    problem: &P,
    state_grid: StateGrid<T>,
    input_grid: InputGrid<T>,
    criterion: StoppingCriterion<T>,
    options: &RunOptions<T>,
    fixed: Option<usize>,
    mut observer: impl FnMut(&IterationRecord),
) -> Result<ViRun<T>, EngineError> {
    if options.d_max < 1 {
        return Err(EngineError::InvalidConfig(
            "d_max must be at least 1".into(),
        ));
    }
    let ctx = SweepContext::new(problem, state_grid, input_grid)?;
    let region_bound = match options.region_bound {
        Some(b) if b > T::zero() => b,
        Some(_) => {
            return Err(EngineError::InvalidConfig(
                "region bound must be positive".into(),
            ))
        }
        None => ctx.node_sigma.iter().fold(T::zero(), |a, &b| a.max(b)),
    };
    let mut vi = ValueIteration::new(problem, ctx, options.interp, options.workers)?
        .with_clamp_policy(options.clamp);
    let mut history = Vec::new();
    let mut tables = Vec::new();
    loop {
        let d = vi.advance()?;
        let backup = vi.current().expect("advanced");
        if options.keep_history {
            tables.push(backup.table.clone());
        }
        let check = stop_check(
            vi.context(),
            vi.previous().values(),
            backup.table.values(),
            &criterion,
            region_bound,
        );
        let record = IterationRecord {
            d,
            max_gap: check.max_gap.to_f64_lossy(),
            max_gap_node: check.max_gap_node,
            worst_node: check.worst_node,
            worst_excess: check.worst_excess.to_f64_lossy(),
            satisfied: check.satisfied,
            nodes_violating: check.nodes_violating,
            clamped_candidates: backup.clamped_candidates,
            clamped_argmin_nodes: backup.clamped_argmin_nodes,
            monotonicity_violations: vi.last_monotonicity_violations(),
            wall_ms: vi.last_wall_ms(),
        };
        observer(&record);
        history.push(record);
        let done = match fixed {
            Some(target) => d >= target,
            None => check.satisfied || d >= options.d_max,
        };
        if done {
            let run = finish(
                problem,
                vi,
                criterion,
                region_bound,
                options.d_max,
                history,
                tables,
            );
            debug_assert_eq!(run.stopped(), check.satisfied);
            return Ok(run);
        }
    }
}

fn finish<T: Scalar, P: ControlProblem<T> + ?Sized>(
    problem: &P,
    vi: ValueIteration<'_, T, P>,
    criterion: StoppingCriterion<T>,
    region_bound: T,
    d_max: usize,
    history: Vec<IterationRecord>,
    tables: Vec<ValueTable<T>>,
) -> ViRun<T> {
    let d = vi.d.expect("at least one backup");
    let ValueIteration {
        ctx, prev, curr, ..
    } = vi;
    let Backup { table, policy, .. } = curr.expect("at least one backup");
    let mut run = ViRun::from_tables(
        problem.name(),
        ctx,
        criterion,
        region_bound,
        d,
        prev,
        table,
        policy,
    )
    .expect("engine tables match the grid");
    run.d_max = d_max;
    run.history = history;
    run.tables = tables;
    run
}

impl<T: Scalar> ViRun<T> {
    /// Rebuilds a run from `V_{d-1}`, `V_d` and the policy of sweep `d`,
    /// e.g. from saved artifacts. Gap, stop mask and status are recomputed;
    /// history is empty.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tables(
        problem_name: &str,
        ctx: SweepContext<T>,
        criterion: StoppingCriterion<T>,
        region_bound: T,
        d: usize,
        v_prev: ValueTable<T>,
        v_curr: ValueTable<T>,
        policy: Vec<u32>,
    ) -> Result<Self, EngineError> {
        let len = ctx.state_grid.len();
        if v_prev.grid() != &ctx.state_grid
            || v_curr.grid() != &ctx.state_grid
            || policy.len() != len
        {
            return Err(EngineError::Mismatch(
                "tables do not match the state grid".into(),
            ));
        }
        if let Some(&bad) = policy.iter().find(|&&i| i as usize >= ctx.input_count()) {
            return Err(EngineError::Mismatch(format!(
                "policy index {bad} out of range"
            )));
        }
        let n = ctx.state_grid.dim();
        let gap: Vec<T> = v_curr
            .values()
            .iter()
            .zip(v_prev.values())
            .map(|(a, b)| *a - *b)
            .collect();
        let stop_mask: Vec<bool> = gap
            .iter()
            .enumerate()
            .map(|(node, &g)| {
                g <= criterion.c_stop(
                    &ctx.node_states[node * n..(node + 1) * n],
                    ctx.node_sigma[node],
                )
            })
            .collect();
        let satisfied = stop_mask
            .iter()
            .zip(&ctx.node_sigma)
            .all(|(&ok, &s)| ok || s > region_bound);
        Ok(ViRun {
            problem_name: problem_name.to_string(),
            ctx,
            criterion,
            region_bound,
            d_max: d,
            d,
            status: if satisfied {
                RunStatus::Stopped
            } else {
                RunStatus::NotTerminated
            },
            v_prev,
            v_curr,
            gap,
            stop_mask,
            policy,
            history: Vec::new(),
            tables: Vec::new(),
        })
    }
}

/// Certified bound on the measure of the `d`-th state along the
/// `d`-horizon optimal sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalStageGap<T> {
    pub gap: T,
    pub cstop: T,
    /// `α_W⁻¹(c_stop)`
    pub sigma_bound: T,
}

pub fn terminal_stage_gap<T: Scalar, P: ControlProblem<T> + ?Sized>(
    run: &ViRun<T>,
    problem: &P,
    node: usize,
) -> Result<TerminalStageGap<T>, EngineError> {
    let x = run.ctx.node_state(node);
    let cstop = run.criterion.c_stop(x, problem.sigma(x));
    terminal_bound(problem, run.gap[node], cstop)
}

/// [`terminal_stage_gap`] from raw numbers.
pub fn terminal_bound<T: Scalar, P: ControlProblem<T> + ?Sized>(
    problem: &P,
    gap: T,
    cstop: T,
) -> Result<TerminalStageGap<T>, EngineError> {
    let sigma_bound = problem
        .bounds()
        .alpha_w
        .inverse(cstop, T::inversion_tolerance())?;
    Ok(TerminalStageGap {
        gap,
        cstop,
        sigma_bound,
    })
}

/// States and inputs along the `d`-horizon greedy rollout from a node:
/// stage `k` uses the lookahead against `V_{d-1-k}`. With nearest-neighbour
/// tables successors are snapped onto nodes, which makes the rollout an
/// exact optimal sequence of the snapped problem.
pub fn horizon_rollout<T: Scalar, P: ControlProblem<T> + ?Sized>(
    run: &ViRun<T>,
    problem: &P,
    node: usize,
) -> Result<Vec<(Vec<T>, usize)>, EngineError> {
    if run.tables.len() != run.d + 1 {
        return Err(EngineError::InvalidConfig(
            "horizon rollouts need a run with keep_history".into(),
        ));
    }
    let snap = run.interp() == InterpMode::NearestNeighbor;
    let mut x = run.ctx.node_state(node).to_vec();
    let mut out = Vec::with_capacity(run.d + 1);
    for k in 0..=run.d {
        let against = run.table(run.d as isize - 1 - k as isize).expect("history");
        let best = lookahead(problem, &run.ctx, &against, &x);
        let u = run.ctx.input(best.input).to_vec();
        out.push((x.clone(), best.input));
        let mut next = vec![T::zero(); x.len()];
        problem.step_into(&x, &u, &mut next);
        if snap {
            let (flat, _) = against.nearest_node(&next);
            next = run.ctx.node_state(flat).to_vec();
        }
        x = next;
    }
    Ok(out)
}

/// Largest `ℓ*_d(d, x) - (V_d(x) - V_{d-1}(x))` over all nodes; non-positive
/// when the terminal-stage inequality holds everywhere.
pub fn terminal_stage_excess<T: Scalar, P: ControlProblem<T> + ?Sized>(
    run: &ViRun<T>,
    problem: &P,
) -> Result<(T, usize), EngineError> {
    let mut worst = (T::neg_infinity(), 0);
    for node in 0..run.gap.len() {
        let path = horizon_rollout(run, problem, node)?;
        let (x, u) = path.last().expect("d + 1 stages");
        let last_cost = problem.stage_cost(x, run.ctx.input(*u));
        let excess = last_cost - run.gap[node];
        if excess > worst.0 {
            worst = (excess, node);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::CubicIntegrator;

    fn small_ctx(p: &CubicIntegrator<f64>) -> SweepContext<f64> {
        let sg = StateGrid::new(vec![-3.0, -3.0], vec![3.0, 3.0], vec![7, 7]).unwrap();
        let ig = InputGrid::uniform_1d(-1.0, 1.0, 3).unwrap();
        SweepContext::new(p, sg, ig).unwrap()
    }

    #[test]
    fn criterion_values() {
        let x = [1.0, 1.0];
        assert_eq!(StoppingCriterion::uniform(0.5).c_stop(&x, 2.0), 0.5);
        assert_eq!(StoppingCriterion::relative(0.5).c_stop(&x, 2.0), 1.0);
        assert_eq!(StoppingCriterion::mixed_min(0.5).c_stop(&x, 2.0), 0.5);
        assert_eq!(StoppingCriterion::mixed_min(0.5).c_stop(&x, 0.2), 0.1);
        let m =
            StoppingCriterion::new(CriterionKind::MaxOfUniformRelative, vec![0.1, 0.5]).unwrap();
        assert_eq!(m.c_stop(&x, 2.0), 1.0);
        assert_eq!(m.c_stop(&x, 0.0), 0.1);
        let q = StoppingCriterion::new(
            CriterionKind::QuadraticForm {
                weights: vec![2.0, 0.0, 0.0, 1.0],
            },
            vec![0.5],
        )
        .unwrap();
        assert_eq!(q.c_stop(&[1.0, 2.0], 0.0), 0.5 * (2.0 + 4.0));
    }

    #[test]
    fn rejects_indefinite_quadratic_form() {
        let r = StoppingCriterion::<f64>::new(
            CriterionKind::QuadraticForm {
                weights: vec![1.0, 2.0, 2.0, 1.0],
            },
            vec![0.1],
        );
        assert!(matches!(r, Err(EngineError::InvalidCriterion(_))));
        assert!(
            StoppingCriterion::<f64>::new(CriterionKind::MaxOfUniformRelative, vec![0.1]).is_err()
        );
    }

    #[test]
    fn floors_follow_classification() {
        assert!(matches!(
            StoppingCriterion::uniform(0.3).floor(None),
            Some(StopFloor::Constant { floor }) if floor == 0.3
        ));
        assert!(matches!(
            StoppingCriterion::relative(0.3).floor(None),
            Some(StopFloor::Linear { rate, valid_up_to: None }) if rate == 0.3
        ));
        assert!(matches!(
            StoppingCriterion::mixed_min(0.4).floor(Some(2000.0)),
            Some(StopFloor::Linear { valid_up_to: Some(d), .. }) if d == 2000.0
        ));
    }

    #[test]
    fn default_majorants_dominate() {
        let p = CubicIntegrator::<f64>::default();
        let states: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![-10.0 + 0.4 * i as f64, -1000.0 + 40.0 * i as f64])
            .collect();
        for c in [
            StoppingCriterion::uniform(0.2),
            StoppingCriterion::relative(0.2),
            StoppingCriterion::mixed_min(0.2),
            StoppingCriterion::new(CriterionKind::MaxOfUniformRelative, vec![0.1, 0.2]).unwrap(),
        ] {
            assert!(c.majorant_violations(&p, &states).unwrap().is_empty());
        }
    }

    #[test]
    fn first_backup_is_min_stage_cost() {
        let p = CubicIntegrator::default();
        let ctx = small_ctx(&p);
        let zero = ValueTable::zeros(ctx.state_grid().clone(), InterpMode::NearestNeighbor);
        let b = bellman_backup(&p, &ctx, &zero, None).unwrap();
        let origin = ctx.state_grid().flatten(&[3, 3]).unwrap();
        assert_eq!(b.table.values()[origin], 0.0);
        assert_eq!(b.policy[origin], 1);
        let one_one = ctx.state_grid().flatten(&[4, 4]).unwrap();
        assert_eq!(b.table.values()[one_one], 2.0);
        assert_eq!(ctx.input(b.policy[one_one] as usize), &[0.0]);
    }

    #[test]
    fn second_backup_reaches_origin() {
        let p = CubicIntegrator::default();
        let ctx = small_ctx(&p);
        let mut vi = ValueIteration::new(&p, ctx, InterpMode::NearestNeighbor, 1).unwrap();
        vi.advance().unwrap();
        vi.advance().unwrap();
        let b = vi.current().unwrap();
        let node = vi.context().state_grid().flatten(&[4, 4]).unwrap();
        assert_eq!(b.table.values()[node], 3.0);
        assert_eq!(vi.context().input(b.policy[node] as usize), &[-1.0]);
    }

    #[test]
    fn non_finite_cost_names_the_node() {
        let p = CubicIntegrator::default();
        let ctx = small_ctx(&p);
        let mut vals = vec![0.0; 49];
        vals[10] = f64::INFINITY;
        let bad = ValueTable::from_values_unchecked(
            ctx.state_grid().clone(),
            vals,
            InterpMode::NearestNeighbor,
        );
        match bellman_backup(&p, &ctx, &bad, None) {
            Err(EngineError::NonFinite { node, .. }) => assert!(node < 49),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn relative_ten_stops_immediately() {
        let p = CubicIntegrator::default();
        let sg = StateGrid::new(vec![-10.0, -1000.0], vec![10.0, 1000.0], vec![20, 20]).unwrap();
        let ig = InputGrid::uniform_1d(-20.0, 20.0, 41).unwrap();
        let run = run_until_stop(
            &p,
            sg,
            ig,
            StoppingCriterion::relative(10.0),
            &RunOptions::default(),
        )
        .unwrap();
        assert!(run.stopped());
        assert_eq!(run.d, 0);
    }

    #[test]
    fn uniform_ten_does_not_stop_at_zero() {
        let p = CubicIntegrator::default();
        let sg = StateGrid::new(vec![-10.0, -1000.0], vec![10.0, 1000.0], vec![20, 20]).unwrap();
        let ig = InputGrid::uniform_1d(-20.0, 20.0, 41).unwrap();
        let run = run_until_stop(
            &p,
            sg,
            ig,
            StoppingCriterion::uniform(10.0),
            &RunOptions::default(),
        )
        .unwrap();
        assert!(run.d > 0);
        assert!(!run.history[0].satisfied);
        let corner = run.ctx.state_grid().flatten(&[19, 0]).unwrap();
        assert_eq!(run.ctx.node_state(corner), &[10.0, -1000.0]);
    }

    #[test]
    fn capped_run_is_data_not_error() {
        let p = CubicIntegrator::default();
        let ctx = small_ctx(&p);
        let opts = RunOptions {
            d_max: 1,
            interp: InterpMode::NearestNeighbor,
            ..RunOptions::default()
        };
        let run = run_until_stop(
            &p,
            ctx.state_grid().clone(),
            ctx.input_grid().clone(),
            StoppingCriterion::uniform(1e-9),
            &opts,
        )
        .unwrap();
        assert_eq!(run.status, RunStatus::NotTerminated);
        assert_eq!(run.d, 1);
        assert_eq!(run.history.len(), 2);
    }

    #[test]
    fn terminal_bound_inverts_alpha_w() {
        let p = CubicIntegrator::<f64>::default();
        assert_eq!(terminal_bound(&p, 0.1, 0.14).unwrap().sigma_bound, 0.14);
        assert_eq!(terminal_bound(&p, 0.0, 0.0).unwrap().sigma_bound, 0.0);
    }
}
