//! Monotone comparison functions (class K and K-infinity).
//!
//! Every certificate in this crate is a composition of a handful of scalar
//! maps on the non-negative half line: the stabilizability bound, the
//! detectability bound, their inverses and the contraction `s - g(s)`.
//! [`MonotoneFn`] is a small expression tree over those maps with
//! evaluation, inversion and k-fold iteration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Number of log-spaced sample points used by [`MonotoneFn::check_class_k`].
pub const DEFAULT_MONOTONICITY_SAMPLES: usize = 256;

const MAX_BRACKET_DOUBLINGS: usize = 2_100;
const MAX_BISECTION_STEPS: usize = 400;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComparisonError {
    #[error("comparison function evaluated at negative argument {0}")]
    NegativeArgument(f64),
    #[error("argument {s} lies outside the declared domain [0, {upper}]")]
    OutsideDomain { s: f64, upper: f64 },
    #[error("value {y} is outside the range of the function")]
    OutOfRange { y: f64 },
    #[error("inversion of {y} did not converge after {iterations} bisection steps")]
    NoConvergence { y: f64, iterations: usize },
    #[error("malformed comparison function: {0}")]
    Malformed(String),
}

/// A monotone map `[0, inf) -> [0, inf)` built from closed-form leaves and
/// combinators.
///
/// Serialized with an internal `kind` tag, e.g. `{"kind":"linear","gain":14.0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum MonotoneFn<T> {
    Identity,
    Linear {
        gain: T,
    },
    /// `coeff * s^exponent`
    Power {
        coeff: T,
        exponent: T,
    },
    /// `outer(inner(s))`
    Compose {
        outer: Box<MonotoneFn<T>>,
        inner: Box<MonotoneFn<T>>,
    },
    /// `factor * inner(s)`
    Scale {
        factor: T,
        inner: Box<MonotoneFn<T>>,
    },
    Sum {
        terms: Vec<MonotoneFn<T>>,
    },
    Min {
        terms: Vec<MonotoneFn<T>>,
    },
    Max {
        terms: Vec<MonotoneFn<T>>,
    },
    /// `s - inner(s)`; only meaningful while the result stays increasing.
    ShiftedIdentityMinus {
        inner: Box<MonotoneFn<T>>,
    },
    /// Interpolates `(s, y)` breakpoints starting at `(0, 0)`; extrapolates
    /// with the last segment's slope.
    PiecewiseLinear {
        breakpoints: Vec<[T; 2]>,
    },
    /// Functional inverse of `inner`, evaluated numerically when needed.
    Inverse {
        inner: Box<MonotoneFn<T>>,
    },
    /// `inner` with a domain hint `[0, upper]`; evaluation beyond it fails.
    Restricted {
        upper: T,
        inner: Box<MonotoneFn<T>>,
    },
}

impl<T: Scalar> MonotoneFn<T> {
    pub fn identity() -> Self {
        MonotoneFn::Identity
    }

    pub fn linear(gain: T) -> Self {
        MonotoneFn::Linear { gain }
    }

    pub fn power(coeff: T, exponent: T) -> Self {
        MonotoneFn::Power { coeff, exponent }
    }

    /// `self ∘ inner`
    pub fn after(self, inner: MonotoneFn<T>) -> Self {
        MonotoneFn::Compose {
            outer: Box::new(self),
            inner: Box::new(inner),
        }
    }

    pub fn scaled(self, factor: T) -> Self {
        MonotoneFn::Scale {
            factor,
            inner: Box::new(self),
        }
    }

    pub fn inverted(self) -> Self {
        MonotoneFn::Inverse {
            inner: Box::new(self),
        }
    }

    /// `𝕀 - self`
    pub fn subtracted_from_identity(self) -> Self {
        MonotoneFn::ShiftedIdentityMinus {
            inner: Box::new(self),
        }
    }

    pub fn restricted(self, upper: T) -> Self {
        MonotoneFn::Restricted {
            upper,
            inner: Box::new(self),
        }
    }

    pub fn piecewise_linear(breakpoints: Vec<[T; 2]>) -> Result<Self, ComparisonError> {
        let f = MonotoneFn::PiecewiseLinear { breakpoints };
        f.validate()?;
        Ok(f)
    }

    /// Structural checks that do not need sampling: positive gains, non-empty
    /// lists, well-formed breakpoints.
    pub fn validate(&self) -> Result<(), ComparisonError> {
        let malformed = |m: &str| Err(ComparisonError::Malformed(m.to_string()));
        match self {
            MonotoneFn::Identity => Ok(()),
            MonotoneFn::Linear { gain } => {
                if !(gain.is_finite() && *gain > T::zero()) {
                    return malformed("linear gain must be positive and finite");
                }
                Ok(())
            }
            MonotoneFn::Power { coeff, exponent } => {
                if !(coeff.is_finite() && *coeff > T::zero()) {
                    return malformed("power coefficient must be positive and finite");
                }
                if !(exponent.is_finite() && *exponent > T::zero()) {
                    return malformed("power exponent must be positive and finite");
                }
                Ok(())
            }
            MonotoneFn::Compose { outer, inner } => {
                outer.validate()?;
                inner.validate()
            }
            MonotoneFn::Scale { factor, inner } => {
                if !(factor.is_finite() && *factor > T::zero()) {
                    return malformed("scale factor must be positive and finite");
                }
                inner.validate()
            }
            MonotoneFn::Sum { terms } | MonotoneFn::Min { terms } | MonotoneFn::Max { terms } => {
                if terms.is_empty() {
                    return malformed("sum/min/max needs at least one term");
                }
                terms.iter().try_for_each(|t| t.validate())
            }
            MonotoneFn::ShiftedIdentityMinus { inner } | MonotoneFn::Inverse { inner } => {
                inner.validate()
            }
            MonotoneFn::Restricted { upper, inner } => {
                if !(*upper > T::zero()) {
                    return malformed("domain upper bound must be positive");
                }
                inner.validate()
            }
            MonotoneFn::PiecewiseLinear { breakpoints } => {
                if breakpoints.len() < 2 {
                    return malformed("piecewise linear needs at least two breakpoints");
                }
                if breakpoints[0] != [T::zero(), T::zero()] {
                    return malformed("piecewise linear must start at (0, 0)");
                }
                for w in breakpoints.windows(2) {
                    if !(w[1][0] > w[0][0] && w[1][1] > w[0][1]) {
                        return malformed(
                            "piecewise linear breakpoints must be strictly increasing",
                        );
                    }
                }
                Ok(())
            }
        }
    }

    pub fn evaluate(&self, s: T) -> Result<T, ComparisonError> {
        if !(s >= T::zero()) {
            return Err(ComparisonError::NegativeArgument(s.to_f64_lossy()));
        }
        match self {
            MonotoneFn::Identity => Ok(s),
            MonotoneFn::Linear { gain } => Ok(*gain * s),
            MonotoneFn::Power { coeff, exponent } => Ok(*coeff * s.powf(*exponent)),
            MonotoneFn::Compose { outer, inner } => outer.evaluate(inner.evaluate(s)?),
            MonotoneFn::Scale { factor, inner } => Ok(*factor * inner.evaluate(s)?),
            MonotoneFn::Sum { terms } => {
                let mut acc = T::zero();
                for t in terms {
                    acc = acc + t.evaluate(s)?;
                }
                Ok(acc)
            }
            MonotoneFn::Min { terms } => fold_terms(terms, s, T::min),
            MonotoneFn::Max { terms } => fold_terms(terms, s, T::max),
            MonotoneFn::ShiftedIdentityMinus { inner } => {
                let out = s - inner.evaluate(s)?;
                if out < T::zero() {
                    return Err(ComparisonError::Malformed(format!(
                        "s - g(s) is negative at s = {s}"
                    )));
                }
                Ok(out)
            }
            MonotoneFn::PiecewiseLinear { breakpoints } => piecewise_eval(breakpoints, s),
            MonotoneFn::Inverse { inner } => inner.inverse(s, T::inversion_tolerance()),
            MonotoneFn::Restricted { upper, inner } => {
                if s > *upper {
                    return Err(ComparisonError::OutsideDomain {
                        s: s.to_f64_lossy(),
                        upper: upper.to_f64_lossy(),
                    });
                }
                inner.evaluate(s)
            }
        }
    }

    /// Returns `s` with `|f(s) - y| <= tol * max(1, y)`.
    ///
    /// Closed form for the leaves and for `Scale`/`Compose`/`Inverse`
    /// chains, exact per-segment inversion for piecewise-linear functions,
    /// bracketing bisection for everything else.
    pub fn inverse(&self, y: T, tol: T) -> Result<T, ComparisonError> {
        if !(y >= T::zero()) {
            return Err(ComparisonError::NegativeArgument(y.to_f64_lossy()));
        }
        match self {
            MonotoneFn::Identity => Ok(y),
            MonotoneFn::Linear { gain } => {
                if *gain > T::zero() {
                    Ok(y / *gain)
                } else if y == T::zero() {
                    Ok(T::zero())
                } else {
                    Err(ComparisonError::OutOfRange {
                        y: y.to_f64_lossy(),
                    })
                }
            }
            MonotoneFn::Power { coeff, exponent } => {
                if *coeff > T::zero() {
                    Ok((y / *coeff).powf(exponent.recip()))
                } else if y == T::zero() {
                    Ok(T::zero())
                } else {
                    Err(ComparisonError::OutOfRange {
                        y: y.to_f64_lossy(),
                    })
                }
            }
            MonotoneFn::Scale { factor, inner } => {
                if *factor > T::zero() {
                    inner.inverse(y / *factor, tol)
                } else {
                    Err(ComparisonError::OutOfRange {
                        y: y.to_f64_lossy(),
                    })
                }
            }
            MonotoneFn::Compose { outer, inner } => inner.inverse(outer.inverse(y, tol)?, tol),
            MonotoneFn::Inverse { inner } => inner.evaluate(y),
            MonotoneFn::PiecewiseLinear { breakpoints } => piecewise_inverse(breakpoints, y),
            MonotoneFn::Restricted { upper, inner } => {
                let s = inner.inverse(y, tol)?;
                if s > *upper {
                    return Err(ComparisonError::OutOfRange {
                        y: y.to_f64_lossy(),
                    });
                }
                Ok(s)
            }
            MonotoneFn::Sum { .. }
            | MonotoneFn::Min { .. }
            | MonotoneFn::Max { .. }
            | MonotoneFn::ShiftedIdentityMinus { .. } => self.bisect_inverse(y, tol),
        }
    }

    fn bisect_inverse(&self, y: T, tol: T) -> Result<T, ComparisonError> {
        if y == T::zero() {
            return Ok(T::zero());
        }
        let scale = T::one().max(y);
        let two = T::lit(2.0);
        let mut lo = T::zero();
        let mut hi = scale;
        let mut doublings = 0;
        while self.evaluate(hi)? < y {
            lo = hi;
            hi = hi * two;
            doublings += 1;
            if doublings > MAX_BRACKET_DOUBLINGS || !hi.is_finite() {
                return Err(ComparisonError::OutOfRange {
                    y: y.to_f64_lossy(),
                });
            }
        }
        let accept = tol * scale;
        for _ in 0..MAX_BISECTION_STEPS {
            let mid = (lo + hi) / two;
            if mid <= lo || mid >= hi {
                break;
            }
            let fm = self.evaluate(mid)?;
            let width_ok = hi - lo <= tol * T::one().max(mid);
            if (fm - y).abs() <= accept && width_ok {
                return Ok(mid);
            }
            if fm < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // Interval collapsed to adjacent floats; accept the better end.
        let (flo, fhi) = (self.evaluate(lo)?, self.evaluate(hi)?);
        let best = if (flo - y).abs() <= (fhi - y).abs() {
            (lo, flo)
        } else {
            (hi, fhi)
        };
        if (best.1 - y).abs() <= accept {
            Ok(best.0)
        } else {
            Err(ComparisonError::NoConvergence {
                y: y.to_f64_lossy(),
                iterations: MAX_BISECTION_STEPS,
            })
        }
    }

    /// Applies the function `k` times; `k = 0` is the identity.
    pub fn iterate(&self, k: usize, s: T) -> Result<T, ComparisonError> {
        let mut v = s;
        for _ in 0..k {
            v = self.evaluate(v)?;
        }
        Ok(v)
    }

    /// Sample-based class-K test on `[lo, hi]`: `f(0) = 0` and strict
    /// increase over `samples` log-spaced points. Returns the first offending
    /// pair on failure.
    pub fn check_class_k(&self, lo: T, hi: T, samples: usize) -> Result<(), ClassKViolation> {
        let zero = self
            .evaluate(T::zero())
            .map_err(|e| ClassKViolation::Evaluation(e.to_string()))?;
        if zero != T::zero() {
            return Err(ClassKViolation::NonzeroAtZero(zero.to_f64_lossy()));
        }
        let points = log_spaced(lo, hi, samples);
        let mut prev = (T::zero(), T::zero());
        for s in points {
            let v = self
                .evaluate(s)
                .map_err(|e| ClassKViolation::Evaluation(e.to_string()))?;
            if !(v > prev.1) {
                return Err(ClassKViolation::NotIncreasing {
                    a: prev.0.to_f64_lossy(),
                    b: s.to_f64_lossy(),
                    fa: prev.1.to_f64_lossy(),
                    fb: v.to_f64_lossy(),
                });
            }
            prev = (s, v);
        }
        Ok(())
    }

    /// [`check_class_k`](Self::check_class_k) over `[1e-6, 1e6]`, clipped to
    /// the domain hint when one is present.
    pub fn check_class_k_default(&self) -> Result<(), ClassKViolation> {
        let hi = match self {
            MonotoneFn::Restricted { upper, .. } => *upper,
            _ => T::lit(1e6),
        };
        let lo = T::lit(1e-6).min(hi / T::lit(2.0));
        self.check_class_k(lo, hi, DEFAULT_MONOTONICITY_SAMPLES)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassKViolation {
    #[error("f(0) = {0}, expected 0")]
    NonzeroAtZero(f64),
    #[error("not strictly increasing: f({a}) = {fa} >= f({b}) = {fb}")]
    NotIncreasing { a: f64, b: f64, fa: f64, fb: f64 },
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

/// `n` log-spaced points in `[lo, hi]` (`lo > 0`), endpoints included.
pub fn log_spaced<T: Scalar>(lo: T, hi: T, n: usize) -> Vec<T> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let last = T::from_usize_lossy(n - 1);
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * T::from_usize_lossy(i) / last).exp()
                    }
                })
                .collect()
        }
    }
}

fn fold_terms<T: Scalar>(
    terms: &[MonotoneFn<T>],
    s: T,
    pick: fn(T, T) -> T,
) -> Result<T, ComparisonError> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| ComparisonError::Malformed("empty term list".into()))?;
    let mut acc = first.evaluate(s)?;
    for t in rest {
        acc = pick(acc, t.evaluate(s)?);
    }
    Ok(acc)
}

fn piecewise_eval<T: Scalar>(bp: &[[T; 2]], s: T) -> Result<T, ComparisonError> {
    if bp.len() < 2 {
        return Err(ComparisonError::Malformed("too few breakpoints".into()));
    }
    // Index of the segment [bp[i], bp[i+1]] containing s, or the last one.
    let i = bp[1..].partition_point(|p| p[0] < s).min(bp.len() - 2);
    let ([s0, y0], [s1, y1]) = (bp[i], bp[i + 1]);
    Ok(y0 + (y1 - y0) * (s - s0) / (s1 - s0))
}

fn piecewise_inverse<T: Scalar>(bp: &[[T; 2]], y: T) -> Result<T, ComparisonError> {
    if bp.len() < 2 {
        return Err(ComparisonError::Malformed("too few breakpoints".into()));
    }
    let i = bp[1..].partition_point(|p| p[1] < y).min(bp.len() - 2);
    let ([s0, y0], [s1, y1]) = (bp[i], bp[i + 1]);
    Ok(s0 + (s1 - s0) * (y - y0) / (y1 - y0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    type F = MonotoneFn<f64>;

    #[test]
    fn evaluates_leaves() {
        assert_eq!(F::linear(14.0).evaluate(2.0).unwrap(), 28.0);
        assert_eq!(F::identity().evaluate(0.37).unwrap(), 0.37);
        let v = F::linear(14.0)
            .after(F::linear(1.0))
            .evaluate(0.01)
            .unwrap();
        assert_relative_eq!(v, 0.14, max_relative = 1e-15);
    }

    #[test]
    fn rejects_negative_argument() {
        assert!(matches!(
            F::identity().evaluate(-1.0),
            Err(ComparisonError::NegativeArgument(_))
        ));
        assert!(F::linear(2.0).inverse(-0.5, 1e-10).is_err());
    }

    #[test]
    fn inverts_closed_forms() {
        let tol = 1e-10;
        assert_eq!(F::linear(14.0).inverse(28.0, tol).unwrap(), 2.0);
        assert_relative_eq!(
            F::power(1.0, 3.0).inverse(8.0, tol).unwrap(),
            2.0,
            max_relative = 1e-14
        );
        let f = F::linear(2.0).after(F::power(1.0, 2.0));
        let s = f.inverse(8.0, tol).unwrap();
        assert_relative_eq!(s, 2.0, max_relative = 1e-14);
        assert_relative_eq!(f.evaluate(s).unwrap(), 8.0, max_relative = 1e-14);
    }

    #[test]
    fn bisection_handles_sums_and_extremes() {
        let f = F::Sum {
            terms: vec![F::identity(), F::power(1.0, 3.0)],
        };
        // s + s^3 = 10 at s = 2
        let s = f.inverse(10.0, 1e-12).unwrap();
        assert_relative_eq!(s, 2.0, max_relative = 1e-10);

        let m = F::Max {
            terms: vec![F::linear(0.5), F::power(1.0, 2.0)],
        };
        let s = m.inverse(0.25, 1e-12).unwrap();
        assert_relative_eq!(m.evaluate(s).unwrap(), 0.25, max_relative = 1e-10);
    }

    #[test]
    fn bounded_function_reports_range_error() {
        // s - s/2 ... fine; but min(s, restricted) cannot exceed domain
        let f = F::identity().restricted(1.0);
        assert!(matches!(
            f.evaluate(1.5),
            Err(ComparisonError::OutsideDomain { .. })
        ));
        assert!(matches!(
            f.inverse(2.0, 1e-10),
            Err(ComparisonError::OutOfRange { .. })
        ));
        assert!(matches!(
            F::linear(0.0).inverse(1.0, 1e-10),
            Err(ComparisonError::OutOfRange { .. })
        ));
    }

    #[test]
    fn iterate_conventions() {
        let f = F::linear(3.0);
        assert_eq!(f.iterate(0, 5.0).unwrap(), 5.0);
        assert_eq!(F::linear(0.5).iterate(3, 8.0).unwrap(), 1.0);
        let v = F::linear(13.0 / 14.0).iterate(71, 196.0).unwrap();
        let direct = 196.0 * (13.0f64 / 14.0).powi(71);
        assert_relative_eq!(v, direct, max_relative = 1e-12);
        assert!((v - 1.016).abs() < 1e-3);
    }

    #[test]
    fn piecewise_linear_round_trip() {
        let f = F::piecewise_linear(vec![[0.0, 0.0], [1.0, 2.0], [3.0, 3.0]]).unwrap();
        assert_eq!(f.evaluate(0.5).unwrap(), 1.0);
        assert_eq!(f.evaluate(2.0).unwrap(), 2.5);
        // extrapolates with slope 1/2
        assert_eq!(f.evaluate(5.0).unwrap(), 4.0);
        assert_eq!(f.inverse(2.5, 1e-10).unwrap(), 2.0);
        assert_eq!(f.inverse(4.0, 1e-10).unwrap(), 5.0);
        assert!(F::piecewise_linear(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn shifted_identity_contracts() {
        let f = F::linear(1.0 / 14.0).subtracted_from_identity();
        let mut prev = 100.0;
        for k in 1..400 {
            let v = f.iterate(k, 100.0).unwrap();
            assert!(v <= prev);
            prev = v;
        }
        assert!(prev < 1e-10);
        assert!(F::linear(2.0)
            .subtracted_from_identity()
            .evaluate(1.0)
            .is_err());
    }

    #[test]
    fn class_k_sampling() {
        assert!(F::linear(14.0).check_class_k_default().is_ok());
        let flat = F::Min {
            terms: vec![F::identity(), F::identity().restricted(1e9)],
        };
        assert!(flat.check_class_k_default().is_ok());
        let bad = F::linear(1.0).subtracted_from_identity();
        assert!(bad.check_class_k_default().is_err());
    }

    #[test]
    fn serializes_with_kind_tag() {
        let f = F::linear(14.0);
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(text, r#"{"kind":"linear","gain":14.0}"#);
        let tree = F::linear(2.0).after(F::power(1.0, 2.0)).inverted();
        let back: F = serde_json::from_str(&serde_json::to_string(&tree).unwrap()).unwrap();
        assert_eq!(back, tree);
    }

    #[test]
    fn composition_is_associative() {
        let (a, b, c) = (F::linear(3.0), F::power(2.0, 1.5), F::linear(0.25));
        let left = a.clone().after(b.clone()).after(c.clone());
        let right = a.after(b.after(c));
        for s in [0.0, 0.1, 1.0, 7.5, 1e4] {
            assert_eq!(left.evaluate(s).unwrap(), right.evaluate(s).unwrap());
        }
    }
}
