//! Analytical guarantees for a finished run: near-optimality gap, stability
//! thresholds and envelopes, running-cost gap, the conservative horizon and
//! Lyapunov-decrease diagnostics.
//!
//! Whenever the problem carries global linear sector constants, formulas
//! are evaluated both through the comparison-function algebra and in closed
//! form, and the two results are cross-checked.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::comparison::{ComparisonError, MonotoneFn};
use crate::engine::{CriterionKind, EngineError, RunStatus, StoppingCriterion, ViRun};
use crate::grid::InterpMode;
use crate::problem::{ControlProblem, Sector};
use crate::scalar::Scalar;
use crate::simulate::Trajectory;

/// Relative tolerance for agreement of the composed and closed-form paths.
pub const CROSS_CHECK_RTOL: f64 = 1e-9;

/// Horizon margin of the long run used as a stand-in for `V_∞`.
pub const DEFAULT_PROXY_MARGIN: usize = 20;

#[derive(Debug, Error)]
pub enum CertificateError {
    #[error("certificate unsupported: {0}")]
    Unsupported(String),
    #[error("certificate inapplicable: {0}")]
    Inapplicable(String),
    #[error("no certificate: {0}")]
    NoCertificate(String),
    #[error("composed and closed-form values disagree: {what} ({composed} vs {closed})")]
    CrossCheck {
        what: &'static str,
        composed: f64,
        closed: f64,
    },
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn global_sector<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
) -> Result<&Sector<T>, CertificateError> {
    match &p.bounds().sector {
        Some(s) if s.is_global() => Ok(s),
        Some(_) => Err(CertificateError::Unsupported(
            "sector constants only hold on a bounded range".into(),
        )),
        None => Err(CertificateError::Unsupported("no sector constants".into())),
    }
}

fn cross_check<T: Scalar>(
    what: &'static str,
    composed: T,
    closed: T,
) -> Result<(), CertificateError> {
    let (a, b) = (composed.to_f64_lossy(), closed.to_f64_lossy());
    let tol = CROSS_CHECK_RTOL.max(T::inversion_tolerance().to_f64_lossy() * 10.0);
    if (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b {
        Ok(())
    } else {
        Err(CertificateError::CrossCheck {
            what,
            composed: a,
            closed: b,
        })
    }
}

/// `v_ε(x) = ᾱ_V ∘ α_W⁻¹(c)` for a stopping value `c = c_stop(ε, x)`.
/// With global sector constants, also checks `v_ε <= (ā_V / a_W) c`.
pub fn near_optimality_from_cstop<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    cstop: T,
) -> Result<T, CertificateError> {
    let b = p.bounds();
    let v = b
        .alpha_v_bar
        .evaluate(b.alpha_w.inverse(cstop, T::inversion_tolerance())?)?;
    if let Ok(s) = global_sector(p) {
        let linear = s.a_v_bar / s.a_w * cstop;
        let slack = linear.abs() * T::inversion_tolerance() * T::lit(10.0);
        if v > linear + slack {
            return Err(CertificateError::CrossCheck {
                what: "near-optimality bound exceeds its linear majorant",
                composed: v.to_f64_lossy(),
                closed: linear.to_f64_lossy(),
            });
        }
    }
    Ok(v)
}

pub fn near_optimality_bound<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    crit: &StoppingCriterion<T>,
    x: &[T],
) -> Result<T, CertificateError> {
    near_optimality_from_cstop(p, crit.c_stop(x, p.sigma(x)))
}

/// Linear sector form `(ā_V / a_W) c_stop(ε, x)`.
pub fn near_optimality_linear<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    crit: &StoppingCriterion<T>,
    x: &[T],
) -> Result<T, CertificateError> {
    let s = global_sector(p)?;
    Ok(s.a_v_bar / s.a_w * crit.c_stop(x, p.sigma(x)))
}

/// `a_W² / ā_V`; the exponential certificate needs `|ε|` strictly below it.
pub fn epsilon_star_global<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
) -> Result<T, CertificateError> {
    let s = global_sector(p)?;
    Ok(s.a_w * s.a_w / s.a_v_bar)
}

fn require_below_threshold<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    eps_norm: T,
) -> Result<&Sector<T>, CertificateError> {
    let star = epsilon_star_global(p)?;
    if !(eps_norm >= T::zero() && eps_norm < star) {
        return Err(CertificateError::Inapplicable(format!(
            "|eps| = {eps_norm} is not below eps* = {star}"
        )));
    }
    global_sector(p)
}

/// `1 - (a_W² - |ε| ā_V) / (ā_V a_W)`.
pub fn decay_base<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    eps_norm: T,
) -> Result<T, CertificateError> {
    let s = require_below_threshold(p, eps_norm)?;
    Ok(T::one() - (s.a_w * s.a_w - eps_norm * s.a_v_bar) / (s.a_v_bar * s.a_w))
}

/// `ā_V / a_W`.
pub fn overshoot<T: Scalar, P: ControlProblem<T> + ?Sized>(p: &P) -> Result<T, CertificateError> {
    let s = global_sector(p)?;
    Ok(s.a_v_bar / s.a_w)
}

/// `(ā_V / a_W) · base^k · σ₀`.
pub fn decay_envelope<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    eps_norm: T,
    sigma0: T,
    k: usize,
) -> Result<T, CertificateError> {
    let base = decay_base(p, eps_norm)?;
    Ok(overshoot(p)? * base.powi(k as i32) * sigma0)
}

/// `w_ε = (ā_V³ / a_W) · |ε| / (a_W² - ā_V |ε|)`.
pub fn running_cost_gap<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    eps_norm: T,
) -> Result<T, CertificateError> {
    let s = global_sector(p)?;
    let denom = s.a_w * s.a_w - s.a_v_bar * eps_norm;
    if !(denom > T::zero()) || eps_norm < T::zero() {
        return Err(CertificateError::Inapplicable(format!(
            "running-cost gap undefined for |eps| = {eps_norm}"
        )));
    }
    Ok(s.a_v_bar.powi(3) / s.a_w * eps_norm / denom)
}

/// Smallest horizon `d̄` after which the termination bound drops below
/// `target`: `⌊(ln target − ln(ā_V²/a_W)) / ln(1 − a_W/ā_V)⌋`.
pub fn conservative_horizon<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    target: T,
) -> Result<u64, CertificateError> {
    let s = global_sector(p)?;
    if s.a_w >= s.a_v_bar {
        return Err(CertificateError::Inapplicable(
            "a_w >= a_v_bar: the geometric factor 1 - a_w/a_v_bar is not positive".into(),
        ));
    }
    if !(target > T::zero()) {
        return Err(CertificateError::Inapplicable(
            "target must be positive".into(),
        ));
    }
    let num = target.ln() - (s.a_v_bar * s.a_v_bar / s.a_w).ln();
    let den = (T::one() - s.a_w / s.a_v_bar).ln();
    let q = (num / den).floor();
    Ok(if q <= T::zero() {
        0
    } else {
        q.to_f64_lossy() as u64
    })
}

/// `I - α_W ∘ ᾱ_V⁻¹`, the per-step contraction of the termination bound.
fn termination_contraction<T: Scalar, P: ControlProblem<T> + ?Sized>(p: &P) -> MonotoneFn<T> {
    let b = p.bounds();
    b.alpha_w
        .clone()
        .after(b.alpha_v_bar.clone().inverted())
        .subtracted_from_identity()
}

/// `ᾱ_V ∘ α_W⁻¹ ∘ (I − α_W∘ᾱ_V⁻¹)^d ∘ ᾱ_V(σ)` through the composition
/// algebra only.
pub fn horizon_gap_bound_composed<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    d: usize,
    sigma_x: T,
) -> Result<T, CertificateError> {
    let b = p.bounds();
    let start = b.alpha_v_bar.evaluate(sigma_x)?;
    let contracted = termination_contraction(p).iterate(d, start)?;
    let back = b.alpha_w.inverse(contracted, T::inversion_tolerance())?;
    Ok(b.alpha_v_bar.evaluate(back)?)
}

/// `(ā_V² / a_W)(1 − a_W/ā_V)^d σ`.
pub fn horizon_gap_bound_linear<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    d: usize,
    sigma_x: T,
) -> Result<T, CertificateError> {
    let s = global_sector(p)?;
    Ok(s.a_v_bar * s.a_v_bar / s.a_w * (T::one() - s.a_w / s.a_v_bar).powi(d as i32) * sigma_x)
}

/// Bound on `V_∞(x) − V_d(x)`; cross-checked against the closed form when
/// linear sector data is present and the SA1 functions are themselves
/// linear.
pub fn horizon_gap_bound<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    d: usize,
    sigma_x: T,
) -> Result<T, CertificateError> {
    let composed = horizon_gap_bound_composed(p, d, sigma_x)?;
    if sector_is_exact(p) {
        let closed = horizon_gap_bound_linear(p, d, sigma_x)?;
        cross_check("termination gap bound", composed, closed)?;
    }
    Ok(composed)
}

/// True when `ᾱ_V(s) = ā_V s` and `α_W(s) = a_W s` on the sampled range,
/// so composed and closed forms must coincide rather than merely bound
/// each other.
pub fn sector_is_exact<T: Scalar, P: ControlProblem<T> + ?Sized>(p: &P) -> bool {
    let Ok(s) = global_sector(p) else {
        return false;
    };
    let b = p.bounds();
    crate::comparison::log_spaced(T::lit(1e-3), T::lit(1e4), 16)
        .into_iter()
        .all(|x| {
            let close = |f: &MonotoneFn<T>, g: T| {
                f.evaluate(x)
                    .map(|v| (v - g * x).abs() <= T::lit(1e-12) * (g * x).abs())
                    .unwrap_or(false)
            };
            close(&b.alpha_v_bar, s.a_v_bar) && close(&b.alpha_w, s.a_w)
        })
}

/// `α̃ = α_W ∘ ᾱ_V⁻¹`.
fn alpha_tilde<T: Scalar, P: ControlProblem<T> + ?Sized>(p: &P) -> MonotoneFn<T> {
    let b = p.bounds();
    b.alpha_w.clone().after(b.alpha_v_bar.clone().inverted())
}

/// Both sides of the semiglobal threshold inequality at a given `|ε|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SemiglobalSides<T> {
    pub lhs: T,
    pub rhs: T,
}

impl<T: PartialOrd> SemiglobalSides<T> {
    pub fn holds(&self) -> bool {
        self.lhs < self.rhs
    }
}

/// Evaluates `θ(e, α_W⁻¹(ᾱ_V(Δ)))` and `α_W ∘ ᾱ_V⁻¹(½ α̃(δ̃))` with
/// `δ̃ = (I − α̃/2)⁻¹(α_W(δ))`.
pub fn semiglobal_sides<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    crit: &StoppingCriterion<T>,
    eps_norm: T,
    region: T,
    delta: T,
) -> Result<SemiglobalSides<T>, CertificateError> {
    let theta = crit
        .majorant()
        .ok_or_else(|| CertificateError::Unsupported("criterion has no majorant".into()))?;
    let b = p.bounds();
    let tol = T::inversion_tolerance();
    let half = T::lit(0.5);
    let tilde = alpha_tilde(p);
    let contraction = tilde.clone().scaled(half).subtracted_from_identity();
    let delta_tilde = contraction.inverse(b.alpha_w.evaluate(delta)?, tol)?;
    let rhs = b.alpha_w.evaluate(
        b.alpha_v_bar
            .inverse(half * tilde.evaluate(delta_tilde)?, tol)?,
    )?;
    let big = b.alpha_w.inverse(b.alpha_v_bar.evaluate(region)?, tol)?;
    let lhs = theta.evaluate(eps_norm, big)?;
    Ok(SemiglobalSides { lhs, rhs })
}

/// Largest `|ε|` in `[1e-12, 1e3]` (to relative tolerance `tol`) for which
/// the semiglobal threshold inequality holds, found by bisection.
pub fn epsilon_star_semiglobal<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    crit: &StoppingCriterion<T>,
    region: T,
    delta: T,
    tol: T,
) -> Result<T, CertificateError> {
    if !(region > T::zero() && delta > T::zero()) {
        return Err(CertificateError::Inapplicable(
            "region and delta must be positive".into(),
        ));
    }
    assert_identity_minus_increasing(p)?;
    let (mut lo, mut hi) = (T::lit(1e-12), T::lit(1e3));
    let holds = |e: T| semiglobal_sides(p, crit, e, region, delta).map(|s| s.holds());
    if !holds(lo)? {
        return Err(CertificateError::NoCertificate(
            "threshold inequality fails for every eps in the search bracket".into(),
        ));
    }
    if holds(hi)? {
        return Ok(hi);
    }
    let tol = tol.max(T::epsilon() * T::lit(4.0));
    for _ in 0..400 {
        if hi - lo <= tol * lo {
            break;
        }
        let mid = (lo * hi).sqrt();
        if holds(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

fn half<T: Scalar>() -> T {
    T::lit(0.5)
}

fn assert_identity_minus_increasing<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
) -> Result<(), CertificateError> {
    let tilde = alpha_tilde(p);
    let mut last = T::zero();
    for s in crate::comparison::log_spaced(T::lit(1e-6), T::lit(1e6), 128) {
        let v = s - tilde.evaluate(s)?;
        if v <= last {
            return Err(CertificateError::Inapplicable(
                "I - alpha_W o alpha_V_bar^-1 is not strictly increasing".into(),
            ));
        }
        last = v;
    }
    Ok(())
}

/// Iterate form of the practical-stability envelope:
/// `α_W⁻¹((I − α̃/2)^(k)(ᾱ_V(s)))`.
pub fn practical_envelope<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    sigma0: T,
    k: usize,
) -> Result<T, CertificateError> {
    let b = p.bounds();
    let step = alpha_tilde(p).scaled(half()).subtracted_from_identity();
    let v = step.iterate(k, b.alpha_v_bar.evaluate(sigma0)?)?;
    Ok(b.alpha_w.inverse(v, T::inversion_tolerance())?)
}

/// One positive-slack step of the Lyapunov-decrease check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovViolation {
    pub k: usize,
    pub slack: f64,
}

/// Every term of the Lyapunov-decrease inequality at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovTerm {
    pub k: usize,
    pub y_x: f64,
    pub y_next: f64,
    pub alpha_w_sigma: f64,
    pub v_eps: f64,
    pub proxy_error: f64,
    pub interp_slack: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub proxy_horizon: usize,
    pub terms: Vec<LyapunovTerm>,
    pub violations: Vec<LyapunovViolation>,
}

/// Checks `Y(v) − Y(x) <= −α_W(σ(x)) + v_ε(x)` along `traj`, with `Y` the
/// long-run table standing in for `V_∞`. The proxy error is the
/// termination bound at the long horizon, and the interpolation slack is
/// the spread of the long-run table over the cells containing `x` and `v`.
pub fn lyapunov_decrease_check<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    run: &ViRun<T>,
    long_run: &ViRun<T>,
    traj: &Trajectory<T>,
) -> Result<LyapunovReport, CertificateError> {
    if long_run.d < run.d {
        return Err(CertificateError::Inapplicable(
            "the proxy run must be at least as long as the checked run".into(),
        ));
    }
    let y = &long_run.v_curr;
    let mut terms = Vec::with_capacity(traj.horizon);
    let mut violations = Vec::new();
    for k in 0..traj.horizon {
        let (x, v) = (&traj.states[k], &traj.states[k + 1]);
        let (sx, sv) = (p.sigma(x), p.sigma(v));
        let v_eps = near_optimality_bound(p, &run.criterion, x)?;
        let proxy_error = horizon_gap_bound(p, long_run.d, sx.max(sv))?;
        let interp_slack = y.cell_spread(x) + y.cell_spread(v);
        let (y_x, y_next) = (y.value_at(x), y.value_at(v));
        let alpha_w_sigma = p.bounds().alpha_w.evaluate(sx)?;
        let slack = y_next - y_x + alpha_w_sigma - v_eps - T::lit(2.0) * proxy_error - interp_slack;
        if slack > T::zero() {
            violations.push(LyapunovViolation {
                k,
                slack: slack.to_f64_lossy(),
            });
        }
        terms.push(LyapunovTerm {
            k,
            y_x: y_x.to_f64_lossy(),
            y_next: y_next.to_f64_lossy(),
            alpha_w_sigma: alpha_w_sigma.to_f64_lossy(),
            v_eps: v_eps.to_f64_lossy(),
            proxy_error: proxy_error.to_f64_lossy(),
            interp_slack: interp_slack.to_f64_lossy(),
            slack: slack.to_f64_lossy(),
        });
    }
    Ok(LyapunovReport {
        proxy_horizon: long_run.d,
        terms,
        violations,
    })
}

/// Node-wise comparison of a stopped run against a longer run on the same
/// grids: `V_d <= V_D` and `V_D − V_d <= v_ε + interp_slack`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub d: usize,
    pub long_d: usize,
    pub lower_violations: usize,
    pub worst_lower: f64,
    pub upper_violations: usize,
    /// Largest `V_D − V_d − v_ε − interp_slack`.
    pub worst_upper_excess: f64,
    pub worst_upper_node: usize,
}

impl SandwichReport {
    pub fn holds(&self) -> bool {
        self.lower_violations == 0 && self.upper_violations == 0
    }
}

pub fn sandwich_check<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    run: &ViRun<T>,
    long_run: &ViRun<T>,
    interp_slack: T,
) -> Result<SandwichReport, CertificateError> {
    let slack = vec![interp_slack; run.v_curr.values().len()];
    sandwich_check_with_slack(p, run, long_run, &slack)
}

/// [`sandwich_check`] with a separate slack for every node.
pub fn sandwich_check_with_slack<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    run: &ViRun<T>,
    long_run: &ViRun<T>,
    interp_slack: &[T],
) -> Result<SandwichReport, CertificateError> {
    let (vd, vl) = (run.v_curr.values(), long_run.v_curr.values());
    if vd.len() != vl.len() || interp_slack.len() != vd.len() {
        return Err(CertificateError::Inapplicable(
            "runs use different grids".into(),
        ));
    }
    let v_eps = v_eps_map(p, run)?;
    let mut r = SandwichReport {
        d: run.d,
        long_d: long_run.d,
        lower_violations: 0,
        worst_lower: 0.0,
        upper_violations: 0,
        worst_upper_excess: f64::NEG_INFINITY,
        worst_upper_node: 0,
    };
    for node in 0..vd.len() {
        let lower = (vd[node] - vl[node]).to_f64_lossy();
        if lower > 0.0 {
            r.lower_violations += 1;
            r.worst_lower = r.worst_lower.max(lower);
        }
        let excess = (vl[node] - vd[node] - v_eps[node] - interp_slack[node]).to_f64_lossy();
        if excess > r.worst_upper_excess {
            r.worst_upper_excess = excess;
            r.worst_upper_node = node;
        }
        if excess > 0.0 {
            r.upper_violations += 1;
        }
    }
    Ok(r)
}

/// Per-node interpolation diagnostic: the spread of `V_{d-1}` over the cell
/// containing the successor under the stored policy. Zero on snapped
/// (nearest-neighbour) runs, where successors are looked up exactly.
pub fn interp_slack_map<T: Scalar, P: ControlProblem<T> + ?Sized>(p: &P, run: &ViRun<T>) -> Vec<T> {
    let n = run.v_curr.values().len();
    if run.interp() == InterpMode::NearestNeighbor {
        return vec![T::zero(); n];
    }
    (0..n)
        .into_par_iter()
        .map(|node| {
            let x = run.ctx.node_state(node);
            let mut next = vec![T::zero(); x.len()];
            p.step_into(x, run.ctx.input(run.policy[node] as usize), &mut next);
            run.v_prev.cell_spread(&next)
        })
        .collect()
}

/// `v_ε` at every node of the run's grid, computed in parallel.
pub fn v_eps_map<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    run: &ViRun<T>,
) -> Result<Vec<T>, CertificateError> {
    (0..run.v_curr.values().len())
        .into_par_iter()
        .map(|node| near_optimality_bound(p, &run.criterion, run.ctx.node_state(node)))
        .collect()
}

/// A certificate that is either available or withheld with a reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Certified<V> {
    Available { value: V },
    Unavailable { reason: String },
}

impl<V> Certified<V> {
    pub fn value(&self) -> Option<&V> {
        match self {
            Certified::Available { value } => Some(value),
            Certified::Unavailable { .. } => None,
        }
    }

    fn from_result(r: Result<V, CertificateError>) -> Self {
        match r {
            Ok(value) => Certified::Available { value },
            Err(e) => Certified::Unavailable {
                reason: e.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Some(Summary {
            min,
            mean: sum / values.len() as f64,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentialCertificate {
    pub decay_base: f64,
    pub overshoot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonComparison {
    pub d_bar: u64,
    pub target: f64,
    pub d_stopped: usize,
    /// `d / d̄`
    pub fraction_of_conservative: f64,
    /// `(d̄ − d) / d̄`
    pub iterations_saved: f64,
}

/// All guarantees for one run, with every constant and input included.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub problem: String,
    pub criterion: String,
    pub epsilon: Vec<f64>,
    pub eps_norm: f64,
    pub d: usize,
    pub status: RunStatus,
    pub region_bound: f64,
    pub sector: Option<SectorConstants>,
    pub v_eps: Vec<f64>,
    pub v_eps_summary: Option<Summary>,
    pub eps_star_global: Certified<f64>,
    pub exponential: Certified<ExponentialCertificate>,
    pub w_eps: Certified<f64>,
    pub d_bar: Certified<HorizonComparison>,
    pub eps_star_semiglobal: Certified<f64>,
    pub lyapunov: Option<LyapunovReport>,
    pub lyapunov_violations: Vec<LyapunovViolation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectorConstants {
    pub a_v_bar: f64,
    pub a_w: f64,
    pub limit: Option<f64>,
}

/// Inputs to [`certify`] beyond the run itself.
#[derive(Debug, Clone)]
pub struct CertifyOptions<T> {
    pub horizon_target: T,
    /// `δ` of the semiglobal threshold; `None` skips it.
    pub semiglobal_delta: Option<T>,
    pub semiglobal_tol: T,
}

impl<T: Scalar> Default for CertifyOptions<T> {
    fn default() -> Self {
        CertifyOptions {
            horizon_target: T::one(),
            semiglobal_delta: Some(T::one()),
            semiglobal_tol: T::lit(1e-9),
        }
    }
}

fn relative_bounded<T: Scalar>(crit: &StoppingCriterion<T>) -> Result<(), CertificateError> {
    if crit.bounded_by_relative() {
        Ok(())
    } else {
        Err(CertificateError::Inapplicable(format!(
            "{} criterion is not bounded by |eps| sigma(x)",
            crit.kind().label()
        )))
    }
}

/// Assembles the report. Certificates whose hypotheses fail are marked
/// unavailable rather than aborting the report.
pub fn certify<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    run: &ViRun<T>,
    options: &CertifyOptions<T>,
    lyapunov: Option<LyapunovReport>,
) -> Result<CertificateReport, CertificateError> {
    let crit = &run.criterion;
    let e = crit.eps_norm();
    let v_eps: Vec<f64> = v_eps_map(p, run)?
        .into_iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let exponential = Certified::from_result(relative_bounded(crit).and_then(|_| {
        Ok(ExponentialCertificate {
            decay_base: decay_base(p, e)?.to_f64_lossy(),
            overshoot: overshoot(p)?.to_f64_lossy(),
        })
    }));
    let w_eps = Certified::from_result(
        relative_bounded(crit)
            .and_then(|_| require_below_threshold(p, e).map(|_| ()))
            .and_then(|_| running_cost_gap(p, e))
            .map(|w| w.to_f64_lossy()),
    );
    let d_bar = Certified::from_result(conservative_horizon(p, options.horizon_target).map(
        |d_bar| HorizonComparison {
            d_bar,
            target: options.horizon_target.to_f64_lossy(),
            d_stopped: run.d,
            fraction_of_conservative: run.d as f64 / d_bar as f64,
            iterations_saved: (d_bar as f64 - run.d as f64) / d_bar as f64,
        },
    ));
    let eps_star_semiglobal = Certified::from_result(match options.semiglobal_delta {
        Some(delta) => {
            epsilon_star_semiglobal(p, crit, run.region_bound, delta, options.semiglobal_tol)
                .map(|v| v.to_f64_lossy())
        }
        None => Err(CertificateError::Unsupported("no delta requested".into())),
    });
    let lyapunov_violations = lyapunov
        .as_ref()
        .map(|l| l.violations.clone())
        .unwrap_or_default();
    Ok(CertificateReport {
        problem: p.name().to_string(),
        criterion: crit.kind().label().to_string(),
        epsilon: crit.epsilon().iter().map(|v| v.to_f64_lossy()).collect(),
        eps_norm: e.to_f64_lossy(),
        d: run.d,
        status: run.status,
        region_bound: run.region_bound.to_f64_lossy(),
        sector: p.bounds().sector.as_ref().map(|s| SectorConstants {
            a_v_bar: s.a_v_bar.to_f64_lossy(),
            a_w: s.a_w.to_f64_lossy(),
            limit: s.limit.map(|l| l.to_f64_lossy()),
        }),
        v_eps_summary: Summary::of(&v_eps),
        v_eps,
        eps_star_global: Certified::from_result(epsilon_star_global(p).map(|v| v.to_f64_lossy())),
        exponential,
        w_eps,
        d_bar,
        eps_star_semiglobal,
        lyapunov,
        lyapunov_violations,
    })
}

impl CertificateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Whether exponential claims may be made for this criterion kind at all.
pub fn exponential_claim_allowed<T: Scalar>(kind: &CriterionKind<T>) -> bool {
    matches!(kind, CriterionKind::Relative | CriterionKind::MixedMin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{CubicIntegrator, InputBox, Sa1Bounds};

    struct SectorOnly {
        bounds: Sa1Bounds<f64>,
        input: InputBox<f64>,
    }

    impl SectorOnly {
        fn new(a_v_bar: f64, a_w: f64) -> Self {
            SectorOnly {
                bounds: Sa1Bounds {
                    alpha_v_bar: MonotoneFn::linear(a_v_bar),
                    alpha_w: MonotoneFn::linear(a_w),
                    sector: Some(Sector::global(a_v_bar, a_w)),
                },
                input: InputBox {
                    lower: vec![-1.0],
                    upper: vec![1.0],
                },
            }
        }
    }

    impl ControlProblem<f64> for SectorOnly {
        fn name(&self) -> &str {
            "sector_only"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
            out[0] = x[0] + u[0];
        }
        fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
            x[0].abs() + u[0].abs()
        }
        fn sigma(&self, x: &[f64]) -> f64 {
            x[0].abs()
        }
        fn input_box(&self) -> &InputBox<f64> {
            &self.input
        }
        fn bounds(&self) -> &Sa1Bounds<f64> {
            &self.bounds
        }
    }

    #[test]
    fn near_optimality_examples() {
        let p = CubicIntegrator::<f64>::default();
        let v = near_optimality_bound(&p, &StoppingCriterion::uniform(0.01), &[3.0, -7.0]).unwrap();
        assert!((v - 0.14).abs() <= 1e-15);
        let x = [1.0, 1.0];
        let v = near_optimality_bound(&p, &StoppingCriterion::relative(0.01), &x).unwrap();
        assert!((v - 0.28).abs() <= 1e-15);
        assert_eq!(
            near_optimality_bound(&p, &StoppingCriterion::relative(0.01), &[0.0, 0.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn thresholds() {
        assert!(
            (epsilon_star_global(&CubicIntegrator::<f64>::default()).unwrap() - 1.0 / 14.0).abs()
                < 1e-16
        );
        assert_eq!(
            epsilon_star_global(&SectorOnly::new(1.0, 1.0)).unwrap(),
            1.0
        );
        assert_eq!(
            epsilon_star_global(&SectorOnly::new(2.0, 4.0)).unwrap(),
            8.0
        );
    }

    #[test]
    fn envelope_examples() {
        let p = CubicIntegrator::<f64>::default();
        assert_eq!(decay_envelope(&p, 0.01, 1.0, 0).unwrap(), 14.0);
        let base = 1.0 - 0.86 / 14.0;
        assert!((decay_envelope(&p, 0.01, 1.0, 1).unwrap() - 14.0 * base).abs() < 1e-12);
        assert_eq!(decay_envelope(&p, 0.01, 0.0, 5).unwrap(), 0.0);
        assert!(matches!(
            decay_envelope(&p, 0.08, 1.0, 1),
            Err(CertificateError::Inapplicable(_))
        ));
    }

    #[test]
    fn running_cost_examples() {
        let p = CubicIntegrator::<f64>::default();
        assert!((running_cost_gap(&p, 0.05).unwrap() - 2744.0 * 0.05 / 0.3).abs() < 1e-9);
        assert_eq!(running_cost_gap(&p, 0.0).unwrap(), 0.0);
        assert!(running_cost_gap(&p, 1.0 / 14.0).is_err());
    }

    #[test]
    fn horizon_examples() {
        let p = CubicIntegrator::<f64>::default();
        assert_eq!(conservative_horizon(&p, 1.0).unwrap(), 71);
        assert_eq!(conservative_horizon(&p, 196.0).unwrap(), 0);
        assert_eq!(
            conservative_horizon(&SectorOnly::new(2.0, 1.0), 1.0).unwrap(),
            2
        );
        assert!(conservative_horizon(&SectorOnly::new(1.0, 1.0), 1.0).is_err());
    }

    #[test]
    fn termination_bound_examples() {
        let p = CubicIntegrator::<f64>::default();
        assert!((horizon_gap_bound(&p, 0, 1.0).unwrap() - 196.0).abs() < 1e-9);
        let b71 = horizon_gap_bound(&p, 71, 1.0).unwrap();
        assert!((b71 - 196.0 * (13.0f64 / 14.0).powi(71)).abs() < 1e-9 * b71);
        assert!((b71 - 1.016).abs() < 1e-3);
        assert_eq!(horizon_gap_bound(&p, 30, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn semiglobal_matches_hand_value() {
        let p = CubicIntegrator::<f64>::default();
        let crit = StoppingCriterion::relative(0.01);
        let star = epsilon_star_semiglobal(&p, &crit, 2000.0, 1.0, 1e-12).unwrap();
        let expected = 1.0 / (378.0 * 28000.0);
        assert!((star - expected).abs() <= 1e-6 * expected);
        assert!(semiglobal_sides(&p, &crit, star, 2000.0, 1.0)
            .unwrap()
            .holds());
        assert!(!semiglobal_sides(&p, &crit, 1.01 * star, 2000.0, 1.0)
            .unwrap()
            .holds());
    }

    #[test]
    fn practical_envelope_contracts() {
        let p = CubicIntegrator::<f64>::default();
        let e0 = practical_envelope(&p, 2000.0, 0).unwrap();
        assert!((e0 - 28000.0).abs() < 1e-6);
        let e10 = practical_envelope(&p, 2000.0, 10).unwrap();
        assert!((e10 - 28000.0 * (27.0f64 / 28.0).powi(10)).abs() < 1e-6);
    }
}
