//! Deterministic control problems `x+ = f(x, u)` with stage cost, measuring
//! function and the stabilizability/detectability bound data the
//! certificates need.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{log_spaced, MonotoneFn};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("input {input:?} is not admissible (bounds {lower:?}..{upper:?})")]
    InadmissibleInput {
        input: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    #[error("expected a vector of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid problem definition: {0}")]
    Invalid(String),
}

/// Linear sector constants: `a_w s <= α_W(s)` and `ᾱ_V(s) <= a_v_bar s` for
/// `s` in `[0, limit]`; `limit = None` means the bounds hold globally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Sector<T> {
    pub a_v_bar: T,
    pub a_w: T,
    #[serde(default)]
    pub limit: Option<T>,
}

impl<T: Scalar> Sector<T> {
    pub fn global(a_v_bar: T, a_w: T) -> Self {
        Sector {
            a_v_bar,
            a_w,
            limit: None,
        }
    }

    pub fn is_global(&self) -> bool {
        self.limit.is_none()
    }
}

/// Bound data: `V_∞(x) <= ᾱ_V(σ(x))` and `α_W(σ(x)) <= ℓ(x, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Sa1Bounds<T> {
    pub alpha_v_bar: MonotoneFn<T>,
    pub alpha_w: MonotoneFn<T>,
    #[serde(default)]
    pub sector: Option<Sector<T>>,
}

/// State-independent rectangular input set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct InputBox<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> InputBox<T> {
    pub fn contains(&self, u: &[T]) -> bool {
        u.len() == self.lower.len()
            && u.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }
}

/// A discrete-time control problem.
///
/// Implementations must be pure: equal arguments give bit-identical
/// results. The value-iteration sweep calls [`step_into`](Self::step_into)
/// and [`stage_cost`](Self::stage_cost) about 10^8 times per iteration at the
/// reference resolution, so they take slices and write into caller buffers.
pub trait ControlProblem<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Writes `f(x, u)` into `out`. `u` is assumed admissible.
    fn step_into(&self, x: &[T], u: &[T], out: &mut [T]);
    fn stage_cost(&self, x: &[T], u: &[T]) -> T;
    fn sigma(&self, x: &[T]) -> T;
    fn input_box(&self) -> &InputBox<T>;
    fn bounds(&self) -> &Sa1Bounds<T>;
}

/// Checked `f(x, u)`: rejects inadmissible inputs and wrong dimensions.
pub fn step<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    x: &[T],
    u: &[T],
) -> Result<Vec<T>, ProblemError> {
    if x.len() != p.state_dim() {
        return Err(ProblemError::Dimension {
            expected: p.state_dim(),
            got: x.len(),
        });
    }
    let bx = p.input_box();
    if !bx.contains(u) {
        let f = |v: &[T]| v.iter().map(|c| c.to_f64_lossy()).collect::<Vec<_>>();
        return Err(ProblemError::InadmissibleInput {
            input: f(u),
            lower: f(&bx.lower),
            upper: f(&bx.upper),
        });
    }
    let mut out = vec![T::zero(); p.state_dim()];
    p.step_into(x, u, &mut out);
    Ok(out)
}

/// The discrete cubic integrator `(x1 + u, x2 + u^3)` with
/// `ℓ = |x1|^3 + |x2| + |u|^3`, `σ = |x1|^3 + |x2|`, `ᾱ_V = 14𝕀`, `α_W = 𝕀`.
#[derive(Debug, Clone)]
pub struct CubicIntegrator<T> {
    input_box: InputBox<T>,
    bounds: Sa1Bounds<T>,
}

impl<T: Scalar> CubicIntegrator<T> {
    pub const NAME: &'static str = "cubic_integrator";

    /// Inputs restricted to `[-input_bound, input_bound]`.
    pub fn new(input_bound: T) -> Self {
        CubicIntegrator {
            input_box: InputBox {
                lower: vec![-input_bound],
                upper: vec![input_bound],
            },
            bounds: Sa1Bounds {
                alpha_v_bar: MonotoneFn::linear(T::lit(14.0)),
                alpha_w: MonotoneFn::identity(),
                sector: Some(Sector::global(T::lit(14.0), T::one())),
            },
        }
    }
}

impl<T: Scalar> Default for CubicIntegrator<T> {
    fn default() -> Self {
        Self::new(T::lit(20.0))
    }
}

impl<T: Scalar> ControlProblem<T> for CubicIntegrator<T> {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    #[inline]
    fn step_into(&self, x: &[T], u: &[T], out: &mut [T]) {
        let u = u[0];
        out[0] = x[0] + u;
        out[1] = x[1] + u * u * u;
    }

    #[inline]
    fn stage_cost(&self, x: &[T], u: &[T]) -> T {
        let u = u[0].abs();
        self.sigma(x) + u * u * u
    }

    #[inline]
    fn sigma(&self, x: &[T]) -> T {
        let a = x[0].abs();
        a * a * a + x[1].abs()
    }

    fn input_box(&self) -> &InputBox<T> {
        &self.input_box
    }

    fn bounds(&self) -> &Sa1Bounds<T> {
        &self.bounds
    }
}

/// `coeff * Π x_i^{state_powers[i]} * Π u_j^{input_powers[j]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Monomial<T> {
    pub coeff: T,
    #[serde(default)]
    pub state_powers: Vec<u32>,
    #[serde(default)]
    pub input_powers: Vec<u32>,
}

impl<T: Scalar> Monomial<T> {
    fn eval(&self, x: &[T], u: &[T]) -> T {
        let mut v = self.coeff;
        for (&xi, &p) in x.iter().zip(&self.state_powers) {
            if p > 0 {
                v = v * xi.powi(p as i32);
            }
        }
        for (&uj, &p) in u.iter().zip(&self.input_powers) {
            if p > 0 {
                v = v * uj.powi(p as i32);
            }
        }
        v
    }
}

/// `coeff * |v[index]|^power`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AbsPowerTerm<T> {
    pub index: usize,
    pub coeff: T,
    pub power: T,
}

/// Weighted sum of absolute powers of state and input components.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AbsPowerSum<T> {
    #[serde(default)]
    pub state_terms: Vec<AbsPowerTerm<T>>,
    #[serde(default)]
    pub input_terms: Vec<AbsPowerTerm<T>>,
}

impl<T: Scalar> AbsPowerSum<T> {
    fn eval(&self, x: &[T], u: &[T]) -> T {
        let term = |t: &AbsPowerTerm<T>, v: &[T]| t.coeff * v[t.index].abs().powf(t.power);
        let xs = self.state_terms.iter().map(|t| term(t, x));
        let us = self.input_terms.iter().map(|t| term(t, u));
        xs.chain(us).fold(T::zero(), |a, b| a + b)
    }
}

/// User-defined problem with polynomial dynamics and absolute-power costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PolynomialProblem<T> {
    #[serde(default = "default_poly_name")]
    pub name: String,
    pub state_dim: usize,
    pub input_dim: usize,
    /// One monomial list per state component.
    pub dynamics: Vec<Vec<Monomial<T>>>,
    pub stage_cost: AbsPowerSum<T>,
    /// Measuring function; input terms are ignored.
    pub measure: AbsPowerSum<T>,
    pub input_box: InputBox<T>,
    pub bounds: Sa1Bounds<T>,
}

fn default_poly_name() -> String {
    "polynomial".to_string()
}

impl<T: Scalar> PolynomialProblem<T> {
    pub fn validate(&self) -> Result<(), ProblemError> {
        let invalid = |m: String| Err(ProblemError::Invalid(m));
        if self.state_dim == 0 || self.input_dim == 0 {
            return invalid("state and input dimensions must be positive".into());
        }
        if self.dynamics.len() != self.state_dim {
            return invalid(format!(
                "dynamics has {} components, state_dim is {}",
                self.dynamics.len(),
                self.state_dim
            ));
        }
        for m in self.dynamics.iter().flatten() {
            if m.state_powers.len() > self.state_dim || m.input_powers.len() > self.input_dim {
                return invalid("monomial has more powers than dimensions".into());
            }
        }
        let check_terms = |terms: &[AbsPowerTerm<T>], dim: usize, what: &str| match terms
            .iter()
            .find(|t| t.index >= dim)
        {
            Some(t) => Err(ProblemError::Invalid(format!(
                "{what} term index {} out of range",
                t.index
            ))),
            None => Ok(()),
        };
        check_terms(&self.stage_cost.state_terms, self.state_dim, "stage cost")?;
        check_terms(&self.stage_cost.input_terms, self.input_dim, "stage cost")?;
        check_terms(&self.measure.state_terms, self.state_dim, "measure")?;
        if self.input_box.lower.len() != self.input_dim
            || self.input_box.upper.len() != self.input_dim
        {
            return invalid("input box dimension mismatch".into());
        }
        self.bounds
            .alpha_v_bar
            .validate()
            .and_then(|_| self.bounds.alpha_w.validate())
            .map_err(|e| ProblemError::Invalid(e.to_string()))
    }
}

impl<T: Scalar> ControlProblem<T> for PolynomialProblem<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn step_into(&self, x: &[T], u: &[T], out: &mut [T]) {
        for (o, comp) in out.iter_mut().zip(&self.dynamics) {
            *o = comp.iter().fold(T::zero(), |acc, m| acc + m.eval(x, u));
        }
    }

    fn stage_cost(&self, x: &[T], u: &[T]) -> T {
        self.stage_cost.eval(x, u)
    }

    fn sigma(&self, x: &[T]) -> T {
        self.measure.eval(x, &[])
    }

    fn input_box(&self) -> &InputBox<T> {
        &self.input_box
    }

    fn bounds(&self) -> &Sa1Bounds<T> {
        &self.bounds
    }
}

/// Points at which the standing assumptions are spot-checked.
#[derive(Debug, Clone)]
pub struct SampleSpec<T> {
    pub states: Vec<Vec<T>>,
    pub inputs: Vec<Vec<T>>,
    /// Arguments `s` for the sector inequalities.
    pub sector_points: Vec<T>,
}

impl<T: Scalar> SampleSpec<T> {
    /// Uniform random states in the box `[lower, upper]` and inputs in the
    /// problem's input box, reproducible from `seed`.
    pub fn random<P: ControlProblem<T> + ?Sized>(
        p: &P,
        lower: &[T],
        upper: &[T],
        n_states: usize,
        n_inputs: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: &[T], hi: &[T]| -> Vec<T> {
            lo.iter()
                .zip(hi)
                .map(|(&a, &b)| {
                    let t: f64 = rng.gen();
                    a + (b - a) * T::lit(t)
                })
                .collect()
        };
        let states = (0..n_states).map(|_| draw(lower, upper)).collect();
        let bx = p.input_box();
        let inputs = (0..n_inputs).map(|_| draw(&bx.lower, &bx.upper)).collect();
        SampleSpec {
            states,
            inputs,
            sector_points: default_sector_points(),
        }
    }
}

/// 64 log-spaced points in `[1e-3, 1e4]`.
pub fn default_sector_points<T: Scalar>() -> Vec<T> {
    log_spaced(T::lit(1e-3), T::lit(1e4), 64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Sa1Violation {
    NegativeStageCost {
        x: Vec<f64>,
        u: Vec<f64>,
        cost: f64,
    },
    Detectability {
        x: Vec<f64>,
        u: Vec<f64>,
        alpha_w_sigma: f64,
        stage_cost: f64,
    },
    SectorLower {
        s: f64,
        alpha_w: f64,
        bound: f64,
    },
    SectorUpper {
        s: f64,
        alpha_v_bar: f64,
        bound: f64,
    },
    Evaluation {
        message: String,
    },
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Sa1Report {
    pub checked_pairs: usize,
    pub checked_sector_points: usize,
    pub violations: Vec<Sa1Violation>,
}

impl Sa1Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Spot-checks `ℓ >= 0`, `α_W(σ(x)) <= ℓ(x, u)` and the sector inequalities.
/// Violations are collected, never raised.
pub fn validate_sa1<T: Scalar, P: ControlProblem<T> + ?Sized>(
    p: &P,
    samples: &SampleSpec<T>,
) -> Sa1Report {
    let mut report = Sa1Report::default();
    let v64 = |v: &[T]| v.iter().map(|c| c.to_f64_lossy()).collect::<Vec<_>>();
    let bounds = p.bounds();
    for x in &samples.states {
        let sigma = p.sigma(x);
        let lower = match bounds.alpha_w.evaluate(sigma) {
            Ok(v) => v,
            Err(e) => {
                report.violations.push(Sa1Violation::Evaluation {
                    message: e.to_string(),
                });
                continue;
            }
        };
        for u in &samples.inputs {
            report.checked_pairs += 1;
            let cost = p.stage_cost(x, u);
            if cost < T::zero() {
                report.violations.push(Sa1Violation::NegativeStageCost {
                    x: v64(x),
                    u: v64(u),
                    cost: cost.to_f64_lossy(),
                });
            }
            if lower > cost {
                report.violations.push(Sa1Violation::Detectability {
                    x: v64(x),
                    u: v64(u),
                    alpha_w_sigma: lower.to_f64_lossy(),
                    stage_cost: cost.to_f64_lossy(),
                });
            }
        }
    }
    if let Some(sector) = &bounds.sector {
        let slack = T::one() + T::epsilon() * T::lit(4.0);
        for &s in &samples.sector_points {
            if let Some(limit) = sector.limit {
                if s > limit {
                    continue;
                }
            }
            report.checked_sector_points += 1;
            match (bounds.alpha_w.evaluate(s), bounds.alpha_v_bar.evaluate(s)) {
                (Ok(aw), Ok(av)) => {
                    let lo = sector.a_w * s;
                    if lo > aw * slack {
                        report.violations.push(Sa1Violation::SectorLower {
                            s: s.to_f64_lossy(),
                            alpha_w: aw.to_f64_lossy(),
                            bound: lo.to_f64_lossy(),
                        });
                    }
                    let hi = sector.a_v_bar * s;
                    if av > hi * slack {
                        report.violations.push(Sa1Violation::SectorUpper {
                            s: s.to_f64_lossy(),
                            alpha_v_bar: av.to_f64_lossy(),
                            bound: hi.to_f64_lossy(),
                        });
                    }
                }
                (Err(e), _) | (_, Err(e)) => report.violations.push(Sa1Violation::Evaluation {
                    message: e.to_string(),
                }),
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic() -> CubicIntegrator<f64> {
        CubicIntegrator::default()
    }

    #[test]
    fn cubic_steps() {
        let p = cubic();
        assert_eq!(step(&p, &[0.0, 0.0], &[0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(step(&p, &[1.0, 1.0], &[-1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            step(&p, &[10.0, -1000.0], &[2.0]).unwrap(),
            vec![12.0, -992.0]
        );
    }

    #[test]
    fn inadmissible_input_is_rejected() {
        let p = cubic();
        assert!(matches!(
            step(&p, &[0.0, 0.0], &[21.0]),
            Err(ProblemError::InadmissibleInput { .. })
        ));
        assert!(matches!(
            step(&p, &[0.0], &[0.0]),
            Err(ProblemError::Dimension { .. })
        ));
    }

    #[test]
    fn cubic_sigma() {
        let p = cubic();
        assert_eq!(p.sigma(&[10.0, -1000.0]), 2000.0);
        assert_eq!(p.sigma(&[0.0, 0.0]), 0.0);
        assert_eq!(p.sigma(&[-1.0, 0.5]), 1.5);
    }

    #[test]
    fn cubic_passes_sa1() {
        let p = cubic();
        let mut spec = SampleSpec::random(&p, &[-10.0, -1000.0], &[10.0, 1000.0], 200, 50, 7);
        spec.sector_points.extend([0.1, 1.0, 1000.0]);
        let report = validate_sa1(&p, &spec);
        assert!(report.passed(), "{:?}", report.violations);
        assert_eq!(report.checked_pairs, 200 * 50);
    }

    fn input_only_cost() -> PolynomialProblem<f64> {
        PolynomialProblem {
            name: "input_only".into(),
            state_dim: 2,
            input_dim: 1,
            dynamics: vec![
                vec![
                    Monomial {
                        coeff: 1.0,
                        state_powers: vec![1, 0],
                        input_powers: vec![],
                    },
                    Monomial {
                        coeff: 1.0,
                        state_powers: vec![],
                        input_powers: vec![1],
                    },
                ],
                vec![
                    Monomial {
                        coeff: 1.0,
                        state_powers: vec![0, 1],
                        input_powers: vec![],
                    },
                    Monomial {
                        coeff: 1.0,
                        state_powers: vec![],
                        input_powers: vec![3],
                    },
                ],
            ],
            stage_cost: AbsPowerSum {
                state_terms: vec![],
                input_terms: vec![AbsPowerTerm {
                    index: 0,
                    coeff: 1.0,
                    power: 3.0,
                }],
            },
            measure: AbsPowerSum {
                state_terms: vec![
                    AbsPowerTerm {
                        index: 0,
                        coeff: 1.0,
                        power: 3.0,
                    },
                    AbsPowerTerm {
                        index: 1,
                        coeff: 1.0,
                        power: 1.0,
                    },
                ],
                input_terms: vec![],
            },
            input_box: InputBox {
                lower: vec![-2.0],
                upper: vec![2.0],
            },
            bounds: Sa1Bounds {
                alpha_v_bar: MonotoneFn::linear(14.0),
                alpha_w: MonotoneFn::identity(),
                sector: None,
            },
        }
    }

    #[test]
    fn detectability_violation_recorded() {
        let p = input_only_cost();
        p.validate().unwrap();
        let spec = SampleSpec {
            states: vec![vec![1.0, 0.0]],
            inputs: vec![vec![0.0]],
            sector_points: vec![],
        };
        let report = validate_sa1(&p, &spec);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            report.violations[0],
            Sa1Violation::Detectability { alpha_w_sigma, stage_cost, .. }
                if alpha_w_sigma == 1.0 && stage_cost == 0.0
        ));
    }

    #[test]
    fn polynomial_matches_cubic_dynamics() {
        let p = input_only_cost();
        let q = cubic();
        for (x, u) in [([10.0, -1000.0], 2.0), ([0.3, 7.0], -1.5)] {
            assert_eq!(step(&p, &x, &[u]).unwrap(), step(&q, &x, &[u]).unwrap());
            assert_eq!(p.sigma(&x), q.sigma(&x));
        }
    }

    #[test]
    fn sector_violation_detected() {
        let mut p = input_only_cost();
        p.bounds.sector = Some(Sector::global(10.0, 1.0));
        let spec = SampleSpec {
            states: vec![],
            inputs: vec![],
            sector_points: vec![0.1, 1.0, 1000.0],
        };
        let report = validate_sa1(&p, &spec);
        assert_eq!(report.violations.len(), 3);
    }

    #[test]
    fn problem_is_pure() {
        let p = cubic();
        let x = [1.2345, -678.9];
        let a = step(&p, &x, &[3.3]).unwrap();
        let b = step(&p, &x, &[3.3]).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            p.stage_cost(&x, &[3.3]).to_bits(),
            p.stage_cost(&x, &[3.3]).to_bits()
        );
    }
}
