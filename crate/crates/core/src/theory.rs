//! Closed-form reference quantities.
//!
//! Tail constant `Lambda(x) = sqrt(lambda/pi) e^{-lambda (x/sigma0)^2} / sigma0 * (|f(q+)| + |f(q-)|)`,
//! so that `P(tau_I > (alpha/lambda) log(1/eps)) ~ Lambda(x) eps^{alpha-1}`.

use serde::Serialize;
use thiserror::Error;

use crate::flow::Conjugation;
use crate::model::{ModelSpec, Side};
use crate::num::{lit, to_f64, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("quadrature did not reach the requested accuracy on [{a}, {b}]")]
    Quadrature { a: f64, b: f64 },
    #[error("point {0} lies outside the interval")]
    OutOfDomain(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Ingredients of the tail constant and the exit split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremConstants<T> {
    pub lambda: T,
    pub sigma0: T,
    pub f_qminus: T,
    pub f_qplus: T,
    /// `(1/lambda) log |f(q-)|`.
    pub c_minus: T,
    /// `(1/lambda) log |f(q+)|`.
    pub c_plus: T,
}

impl<T: Real> TheoremConstants<T> {
    pub fn new(lambda: T, sigma0: T, f_qminus: T, f_qplus: T) -> Self {
        Self {
            lambda,
            sigma0,
            f_qminus,
            f_qplus,
            c_minus: f_qminus.abs().ln() / lambda,
            c_plus: f_qplus.abs().ln() / lambda,
        }
    }

    pub fn from_conjugation(conj: &Conjugation<T>) -> Self {
        let m = conj.model();
        Self::new(m.lambda, m.sigma0(), conj.f_qminus(), conj.f_qplus())
    }

    pub fn c(&self, side: Side) -> T {
        match side {
            Side::Minus => self.c_minus,
            Side::Plus => self.c_plus,
        }
    }

    /// Variance `sigma0^2 / (2 lambda)` of the limiting Gaussian.
    pub fn limit_variance(&self) -> T {
        self.sigma0 * self.sigma0 / (self.lambda + self.lambda)
    }
}

/// Density of `N(mean, variance)` at `z`.
pub fn gaussian_density<T: Real>(z: T, mean: T, variance: T) -> T {
    let d = z - mean;
    (-(d * d) / (variance + variance)).exp() / (T::TAU() * variance).sqrt()
}

/// `Lambda(x)`; `x` is the start point in units of `eps`.
pub fn lambda_constant<T: Real>(c: &TheoremConstants<T>, x: T) -> T {
    let u = x / c.sigma0;
    (c.lambda / T::PI()).sqrt() * (-c.lambda * u * u).exp() / c.sigma0 * (c.f_qplus.abs() + c.f_qminus.abs())
}

/// `(p_minus, p_plus) = |f(q-/+)| / (|f(q+)| + |f(q-)|)`.
pub fn exit_split<T: Real>(c: &TheoremConstants<T>) -> (T, T) {
    let total = c.f_qplus.abs() + c.f_qminus.abs();
    (c.f_qminus.abs() / total, c.f_qplus.abs() / total)
}

/// `T_eps = (1/lambda) (log(R/eps) - log a)` for a small-ball radius `a`.
pub fn deterministic_time<T: Real>(eps: T, r: T, a: T, lambda: T) -> T {
    ((r / eps).ln() - a.ln()) / lambda
}

/// [`deterministic_time`] with `a(eps) = eps^theta`.
pub fn deterministic_t<T: Real>(eps: T, r: T, theta: T, lambda: T) -> T {
    ((r / eps).ln() - theta * eps.ln()) / lambda
}

/// Block structure of the long-horizon recursion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecursionSchedule<T> {
    pub theta: T,
    #[serde(rename = "N")]
    pub n: usize,
    /// `lambda T' / log(1/eps) = (1 + theta) / N`.
    pub alpha_eps: T,
    pub t_prime: T,
    /// `k T'` for `k = 0..=N`.
    pub t_k: Vec<T>,
    /// Variance of `H_k` for `k = 0..=N`.
    pub h_variances: Vec<T>,
}

/// `N = floor(theta) + 1`, `alpha_eps = (1 + theta)/N` and
/// `Var H_k = sigma0^2/(2 lambda) (1 - eps^{2(N-k) alpha}) / (1 - eps^{2 alpha})`.
pub fn recursion_schedule<T: Real>(eps: T, theta: T, lambda: T, sigma0: T) -> Result<RecursionSchedule<T>, TheoryError> {
    if !(eps > T::zero() && eps < T::one()) {
        return Err(TheoryError::Parameter(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(theta >= T::zero()) || !(lambda > T::zero()) || !(sigma0 > T::zero()) {
        return Err(TheoryError::Parameter("theta >= 0, lambda > 0 and sigma0 > 0 required".into()));
    }
    let n = to_f64(theta.floor()) as usize + 1;
    let alpha = (T::one() + theta) / lit(n as f64);
    let t_prime = alpha * eps.recip().ln() / lambda;
    let base = sigma0 * sigma0 / (lambda + lambda);
    let q = eps.powf(alpha + alpha);
    let t_k = (0..=n).map(|k| t_prime * lit(k as f64)).collect();
    let h_variances = (0..=n)
        .map(|k| base * (T::one() - q.powi((n - k) as i32)) / (T::one() - q))
        .collect();
    Ok(RecursionSchedule {
        theta,
        n,
        alpha_eps: alpha,
        t_prime,
        t_k,
        h_variances,
    })
}

const SIMPSON_DEPTH: u32 = 50;
const SIMPSON_BUDGET: usize = 5_000_000;

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &mut impl FnMut(f64) -> f64,
    budget: &mut usize,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64, TheoryError> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    *budget = budget.saturating_sub(2);
    if depth == 0 || *budget == 0 || !delta.is_finite() {
        return Err(TheoryError::Quadrature { a, b });
    }
    Ok(simpson_rec(f, budget, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + simpson_rec(f, budget, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64, TheoryError> {
    if a == b {
        return Ok(0.0);
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut budget = SIMPSON_BUDGET;
    simpson_rec(&mut f, &mut budget, a, b, fa, fm, fb, whole, tol, SIMPSON_DEPTH)
}

/// Exact exit-side probability `P(exit at q+)` from the scale function
/// `s'(y) = exp(-(2/eps^2) int_0^y b/sigma^2)`.
pub fn scale_function_split<T: Real>(model: &ModelSpec<T>, eps: T, x0: T) -> Result<f64, TheoryError> {
    if !(x0 >= model.q_minus && x0 <= model.q_plus) {
        return Err(TheoryError::OutOfDomain(to_f64(x0)));
    }
    if !(eps > T::zero()) {
        return Err(TheoryError::Parameter(format!("eps must be positive, got {eps}")));
    }
    let e2 = to_f64(eps * eps);
    let ratio = |u: f64| {
        let x = lit::<T>(u);
        let s = to_f64(model.diffusion(x));
        to_f64(model.drift(x)) / (s * s)
    };
    // s' is bounded by 1 and peaks at 0 with width of order eps
    let log_s = |y: f64| -> Result<f64, TheoryError> {
        let inner = adaptive_simpson(ratio, 0.0, y, 1e-14 * (1.0 + y.abs()))?;
        Ok(-2.0 / e2 * inner)
    };
    let (qm, qp, x0) = (to_f64(model.q_minus), to_f64(model.q_plus), to_f64(x0));
    let chunk = (0.25 * e2.sqrt()).min(0.1 * (qp - qm));
    let mut breaks = vec![qm, 0.0, x0, qp];
    let mut y = -chunk;
    while y > qm {
        breaks.push(y);
        y -= chunk;
    }
    let mut y = chunk;
    while y < qp {
        breaks.push(y);
        y += chunk;
    }
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup();
    let mut failure = None;
    let mut integrand = |y: f64| match log_s(y) {
        Ok(v) => v.exp(),
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let mut below = 0.0;
    let mut above = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let piece = adaptive_simpson(&mut integrand, a, b, 1e-13 * (b - a))?;
        if b <= x0 {
            below += piece;
        } else {
            above += piece;
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let total = below + above;
    if !(total > 0.0) || !total.is_finite() {
        return Err(TheoryError::Quadrature { a: qm, b: qp });
    }
    Ok(below / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn simpson_integrates_smooth_functions() {
        let v = adaptive_simpson(f64::exp, 0.0, 1.0, 1e-13).unwrap();
        assert_abs_diff_eq!(v, 1f64.exp() - 1.0, epsilon = 1e-12);
        let v = adaptive_simpson(|x| (-x * x).exp(), -8.0, 8.0, 1e-13).unwrap();
        assert_abs_diff_eq!(v, std::f64::consts::PI.sqrt(), epsilon = 1e-11);
    }

    #[test]
    fn simpson_reports_failure() {
        assert!(adaptive_simpson(|x| 1.0 / x, -1.0, 1.0, 1e-12).is_err());
    }
}
