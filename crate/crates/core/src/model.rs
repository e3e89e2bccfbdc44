//! The exit problem: interval, drift, diffusion, and linearization data.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ParseError, ScalarFunction};
use crate::flow::{Conjugation, FlowError};
use crate::num::{lit, to_f64, Real};

/// Grid used by the zero, sign and eta checks.
pub const VALIDATION_GRID: usize = 10_000;
/// Base step of the central difference estimating `b'(0)`.
pub const LAMBDA_STEP: f64 = 1e-5;
const LAMBDA_REL_TOL: f64 = 1e-6;
const DRIFT_AT_ZERO_TOL: f64 = 1e-10;
/// Drift is treated as exactly linear when `sup |eta|` is below this.
pub const LINEAR_ETA_TOL: f64 = 1e-12;

/// Endpoint of the interval reached at exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "-")]
    Minus,
    #[serde(rename = "+")]
    Plus,
}

impl Side {
    pub fn of<T: Real>(v: T) -> Side {
        if v < T::zero() {
            Side::Minus
        } else {
            Side::Plus
        }
    }

    pub fn sign<T: Real>(self) -> T {
        match self {
            Side::Minus => -T::one(),
            Side::Plus => T::one(),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Minus => "-",
            Side::Plus => "+",
        })
    }
}

/// Raw model fields as they appear in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub b: String,
    pub sigma: String,
    pub q_minus: f64,
    pub q_plus: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, rename = "R", skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
}

impl ModelInput {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// A single violated model invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("drift: {0}")]
    DriftSyntax(ParseError),
    #[error("sigma: {0}")]
    SigmaSyntax(ParseError),
    #[error("interval must satisfy q_minus < 0 < q_plus, got [{q_minus}, {q_plus}]")]
    Interval { q_minus: f64, q_plus: f64 },
    #[error("b(0) = {value:e} is not zero")]
    DriftNotZero { value: f64 },
    #[error("lambda = {lambda} must be positive")]
    NonPositiveLambda { lambda: f64 },
    #[error("lambda = {given} disagrees with the central-difference estimate {estimated}")]
    LambdaMismatch { given: f64, estimated: f64 },
    #[error("b has another zero in the interval near x = {location}")]
    ExtraZero { location: f64 },
    #[error("sigma(0) = {value} must be positive")]
    SigmaNotPositive { value: f64 },
    #[error("{which} is not finite at x = {x}")]
    NonFinite { which: &'static str, x: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("requested R = {requested} is too large: must be below {limit} (image of the interval under f)")]
    RadiusTooLarge { requested: f64, limit: f64 },
    #[error("R must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("sigma-tilde vanishes near y = {at} inside [-R, R]")]
    DegenerateNoise { at: f64 },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// A validated exit problem on `[q_minus, q_plus]`.
#[derive(Debug, Clone)]
pub struct ModelSpec<T> {
    pub b: ScalarFunction,
    pub sigma: ScalarFunction,
    pub q_minus: T,
    pub q_plus: T,
    pub lambda: T,
    /// `sup |eta|` over the validation grid, `eta(x) = (b(x) - lambda x) / x^2`.
    pub eta_bound: T,
    /// Neighborhood radius requested in the config, if any.
    pub requested_r: Option<T>,
}

impl<T: Real> ModelSpec<T> {
    #[inline]
    pub fn drift(&self, x: T) -> T {
        self.b.eval(x)
    }

    #[inline]
    pub fn diffusion(&self, x: T) -> T {
        self.sigma.eval(x)
    }

    pub fn sigma0(&self) -> T {
        self.sigma.eval(T::zero())
    }

    /// Nonlinear remainder `eta(x) = (b(x) - lambda x) / x^2`; `b''(0)/2` at the origin.
    pub fn eta(&self, x: T) -> T {
        if x == T::zero() {
            let h: T = lit(1e-4);
            (self.drift(h) + self.drift(-h)) / (h * h + h * h)
        } else {
            (self.drift(x) - self.lambda * x) / (x * x)
        }
    }

    /// Drift is linear to numerical precision (`eta` vanishes on the grid).
    pub fn is_linear_drift(&self) -> bool {
        to_f64(self.eta_bound) <= LINEAR_ETA_TOL
    }

    pub fn contains(&self, x: T) -> bool {
        x >= self.q_minus && x <= self.q_plus
    }

    pub fn width(&self) -> T {
        self.q_plus - self.q_minus
    }

    /// Endpoint on the given side.
    pub fn endpoint(&self, side: Side) -> T {
        match side {
            Side::Minus => self.q_minus,
            Side::Plus => self.q_plus,
        }
    }
}

impl ModelSpec<f64> {
    /// Validates the raw fields; see [`validate_model`].
    pub fn from_input(input: &ModelInput) -> Result<Self, ModelError> {
        validate_model(input)
    }
}

fn grid<T: Real>(a: T, b: T, n: usize) -> impl Iterator<Item = T> {
    let step = (b - a) / lit(n as f64);
    (0..=n).map(move |i| if i == n { b } else { a + step * lit(i as f64) })
}

/// Bisection for a sign change of `f` on `[a, b]`.
fn bisect_root<T: Real>(f: impl Fn(T) -> T, mut a: T, mut b: T) -> T {
    let mut fa = f(a);
    for _ in 0..80 {
        let m = (a + b) * lit(0.5);
        let fm = f(m);
        if fm == T::zero() {
            return m;
        }
        if (fm < T::zero()) == (fa < T::zero()) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    (a + b) * lit(0.5)
}

/// Parses and validates a model, reporting every violated invariant.
///
/// `lambda` is taken from the input when present and otherwise estimated by a
/// central difference of `b` at 0 with step `1e-5`.
pub fn validate_model<T: Real>(input: &ModelInput) -> Result<ModelSpec<T>, ModelError> {
    let mut violations = Vec::new();
    let b = ScalarFunction::parse(&input.b).map_err(Violation::DriftSyntax);
    let sigma = ScalarFunction::parse(&input.sigma).map_err(Violation::SigmaSyntax);
    let (b, sigma) = match (b, sigma) {
        (Ok(b), Ok(s)) => (b, s),
        (b, s) => {
            violations.extend(b.err());
            violations.extend(s.err());
            return Err(ModelError::Invalid(violations));
        }
    };
    if !(input.q_minus < 0.0 && input.q_plus > 0.0) || !input.q_minus.is_finite() || !input.q_plus.is_finite() {
        violations.push(Violation::Interval {
            q_minus: input.q_minus,
            q_plus: input.q_plus,
        });
        return Err(ModelError::Invalid(violations));
    }
    let q_minus: T = lit(input.q_minus);
    let q_plus: T = lit(input.q_plus);

    let b0 = to_f64(b.eval(T::zero()));
    if !b0.is_finite() || b0.abs() > DRIFT_AT_ZERO_TOL {
        violations.push(Violation::DriftNotZero { value: b0 });
    }
    // Richardson step removes the O(h^2) term, which e^{lambda t} would amplify in the conjugation limit.
    let coarse = to_f64(b.derivative(T::zero(), lit(LAMBDA_STEP)));
    let fine = to_f64(b.derivative(T::zero(), lit(0.5 * LAMBDA_STEP)));
    let estimated = (4.0 * fine - coarse) / 3.0;
    let lambda = match input.lambda {
        Some(given) => {
            if !(given > 0.0) {
                violations.push(Violation::NonPositiveLambda { lambda: given });
            } else if (given - estimated).abs() > LAMBDA_REL_TOL * estimated.abs().max(f64::MIN_POSITIVE) {
                violations.push(Violation::LambdaMismatch { given, estimated });
            }
            given
        }
        None => {
            if !(estimated > 0.0) {
                violations.push(Violation::NonPositiveLambda { lambda: estimated });
            }
            estimated
        }
    };
    let s0 = to_f64(sigma.eval(T::zero()));
    if !(s0 > 0.0) {
        violations.push(Violation::SigmaNotPositive { value: s0 });
    }

    // The drift must carry the sign of x everywhere except at the origin;
    // a sign change or touching zero elsewhere is a second equilibrium.
    let lambda_t: T = lit(lambda);
    let mut eta_bound = T::zero();
    let mut prev: Option<(T, T)> = None;
    let mut extra_zero_reported = false;
    for x in grid(q_minus, q_plus, VALIDATION_GRID) {
        let bx = b.eval(x);
        let sx = sigma.eval(x);
        if !bx.is_finite() {
            violations.push(Violation::NonFinite { which: "b", x: to_f64(x) });
            return Err(ModelError::Invalid(violations));
        }
        if !sx.is_finite() {
            violations.push(Violation::NonFinite { which: "sigma", x: to_f64(x) });
            return Err(ModelError::Invalid(violations));
        }
        if x != T::zero() {
            let eta = ((bx - lambda_t * x) / (x * x)).abs();
            if eta > eta_bound {
                eta_bound = eta;
            }
            let wrong_sign = bx == T::zero() || (bx > T::zero()) != (x > T::zero());
            if wrong_sign && !extra_zero_reported {
                let location = match prev {
                    Some((xp, bp)) if bp != T::zero() && (xp > T::zero()) == (x > T::zero()) && bx != T::zero() => {
                        bisect_root(|u| b.eval(u), xp, x)
                    }
                    _ => x,
                };
                violations.push(Violation::ExtraZero {
                    location: to_f64(location),
                });
                extra_zero_reported = true;
            }
        }
        prev = Some((x, bx));
    }

    if !violations.is_empty() {
        return Err(ModelError::Invalid(violations));
    }
    Ok(ModelSpec {
        b,
        sigma,
        q_minus,
        q_plus,
        lambda: lambda_t,
        eta_bound,
        requested_r: input.r.map(lit),
    })
}

/// The neighborhood `V = g([-R, R])` of the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighborhood<T> {
    #[serde(rename = "R")]
    pub r: T,
    pub v_minus: T,
    pub v_plus: T,
}

/// Picks `R` (default half of `min(|f(q-)|, f(q+))`) and maps `[-R, R]` back through `g`.
pub fn choose_neighborhood<T: Real>(
    model: &ModelSpec<T>,
    conj: &Conjugation<T>,
    requested_r: Option<T>,
) -> Result<Neighborhood<T>, ModelError> {
    let limit = conj.f_qminus().abs().min(conj.f_qplus());
    let r = match requested_r.or(model.requested_r) {
        Some(r) => {
            if !(r > T::zero()) {
                return Err(ModelError::NonPositiveRadius(to_f64(r)));
            }
            if r >= limit {
                return Err(ModelError::RadiusTooLarge {
                    requested: to_f64(r),
                    limit: to_f64(limit),
                });
            }
            r
        }
        None => limit * lit(0.5),
    };
    let v_minus = conj.g(-r)?;
    let v_plus = conj.g(r)?;
    if !(v_minus > model.q_minus && v_plus < model.q_plus) {
        return Err(ModelError::RadiusTooLarge {
            requested: to_f64(r),
            limit: to_f64(limit),
        });
    }
    // f' > 0, so sigma-tilde > 0 on [-R, R] iff sigma > 0 on V.
    for x in grid(v_minus, v_plus, 1000) {
        if !(model.diffusion(x) > T::zero()) {
            return Err(ModelError::DegenerateNoise {
                at: to_f64(conj.f(x)?),
            });
        }
    }
    Ok(Neighborhood { r, v_minus, v_plus })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(b: &str, sigma: &str, q_minus: f64, q_plus: f64) -> ModelInput {
        ModelInput {
            b: b.into(),
            sigma: sigma.into(),
            q_minus,
            q_plus,
            lambda: None,
            r: None,
        }
    }

    #[test]
    fn linear_model_is_valid_with_zero_eta() {
        let m: ModelSpec<f64> = validate_model(&input("x", "1", -1.0, 1.0)).unwrap();
        assert_eq!(m.lambda, 1.0);
        assert!(m.eta_bound <= 1e-12);
        assert!(m.is_linear_drift());
    }

    #[test]
    fn cubic_model_is_valid() {
        let m: ModelSpec<f64> = validate_model(&input("x + x^3", "1", -0.7, 0.7)).unwrap();
        assert!((m.lambda - 1.0).abs() < 1e-9);
        // eta(x) = x for the cubic field, so the bound is |q|.
        assert!((m.eta_bound - 0.7).abs() < 1e-9);
        assert!(!m.is_linear_drift());
    }

    #[test]
    fn second_zero_is_reported() {
        let err = validate_model::<f64>(&input("x*(1-x)", "1", -0.5, 1.5)).unwrap_err();
        match err {
            ModelError::Invalid(v) => {
                assert!(v.iter().any(|v| matches!(v, Violation::ExtraZero { location } if (location - 1.0).abs() < 1e-3)))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tangential_zero_is_reported() {
        // b = x (1 - x)^2 touches zero at x = 1 without changing sign.
        let err = validate_model::<f64>(&input("x*(1-x)^2", "1", -0.5, 1.5)).unwrap_err();
        assert!(matches!(err, ModelError::Invalid(ref v) if v.iter().any(|v| matches!(v, Violation::ExtraZero { .. }))));
    }

    #[test]
    fn reports_every_violation() {
        let mut raw = input("x + 1", "-1", -1.0, 1.0);
        raw.lambda = Some(-2.0);
        let ModelError::Invalid(v) = validate_model::<f64>(&raw).unwrap_err() else {
            panic!()
        };
        assert!(v.iter().any(|v| matches!(v, Violation::DriftNotZero { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::NonPositiveLambda { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::SigmaNotPositive { .. })));
    }

    #[test]
    fn lambda_mismatch_is_an_error() {
        let mut raw = input("2*x", "1", -1.0, 1.0);
        raw.lambda = Some(2.0);
        assert!(validate_model::<f64>(&raw).is_ok());
        raw.lambda = Some(2.001);
        assert!(matches!(
            validate_model::<f64>(&raw),
            Err(ModelError::Invalid(ref v)) if matches!(v[0], Violation::LambdaMismatch { .. })
        ));
    }

    #[test]
    fn interval_and_syntax_errors() {
        assert!(matches!(
            validate_model::<f64>(&input("x", "1", 0.5, 1.0)),
            Err(ModelError::Invalid(ref v)) if matches!(v[0], Violation::Interval { .. })
        ));
        let ModelError::Invalid(v) = validate_model::<f64>(&input("x +", "sin(", -1.0, 1.0)).unwrap_err() else {
            panic!()
        };
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn json_fields() {
        let raw = ModelInput::from_json(r#"{"b":"x","sigma":"1","q_minus":-1,"q_plus":1,"R":0.3}"#).unwrap();
        assert_eq!(raw.r, Some(0.3));
        assert_eq!(raw.lambda, None);
        let m: ModelSpec<f64> = validate_model(&raw).unwrap();
        assert_eq!(m.requested_r, Some(0.3));
    }
}
