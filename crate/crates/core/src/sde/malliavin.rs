use serde::Serialize;

use super::{LinearizedModel, Path, SimError};
use crate::num::{lit, to_f64, Real};

/// Pathwise `D_t M(T')` on a grid of base points `t`.
#[derive(Debug, Clone, Serialize)]
pub struct MalliavinTrace<T> {
    pub t_grid: Vec<T>,
    pub value: Vec<T>,
    /// `int_t^{T'} s'(Y) dW`.
    pub z_stochastic: Vec<T>,
    /// `int_t^{T'} (h'(Y) - s'(Y)^2) ds`.
    pub z_drift: Vec<T>,
    pub t_prime: T,
}

/// Index of the grid time closest to `t`.
fn grid_index<T: Real>(times: &[T], t: T) -> usize {
    let k = times.partition_point(|&s| s < t);
    if k == 0 {
        return 0;
    }
    if k == times.len() || t - times[k - 1] < times[k] - t {
        k - 1
    } else {
        k
    }
}

/// `D_t M(T') = e^{-lambda t} s(Y_t) exp(eps Z_stoch + (eps^2/2) Z_drift)` along a
/// linearized path in `Y` coordinates, integrals taken on the path's own grid.
pub fn malliavin_derivative<T: Real>(
    path: &Path<T>,
    t_grid: &[T],
    t_prime: T,
    lin: &LinearizedModel<T>,
    eps: T,
) -> Result<MalliavinTrace<T>, SimError> {
    let horizon = path.horizon();
    let slack = lit::<T>(1e-9) * (T::one() + horizon);
    if t_prime > horizon + slack {
        return Err(SimError::BeyondHorizon {
            requested: to_f64(t_prime),
            horizon: to_f64(horizon),
        });
    }
    if let Some(&t) = t_grid.iter().find(|&&t| t > t_prime + slack || t < T::zero()) {
        return Err(SimError::Config(format!("base point {t} outside [0, {t_prime}]")));
    }
    let c = &lin.coeffs;
    let n = path.dw.len();
    // prefix sums over steps j < k
    let mut stoch = Vec::with_capacity(n + 1);
    let mut drift = Vec::with_capacity(n + 1);
    stoch.push(T::zero());
    drift.push(T::zero());
    for j in 0..n {
        let y = path.states[j];
        let ds = c.sigma_tilde_prime(y);
        let h = path.times[j + 1] - path.times[j];
        stoch.push(stoch[j] + ds * path.dw[j]);
        drift.push(drift[j] + (c.h_prime(y) - ds * ds) * h);
    }
    let end = grid_index(&path.times, t_prime);
    let half_eps2 = lit::<T>(0.5) * eps * eps;
    let mut trace = MalliavinTrace {
        t_grid: t_grid.to_vec(),
        value: Vec::with_capacity(t_grid.len()),
        z_stochastic: Vec::with_capacity(t_grid.len()),
        z_drift: Vec::with_capacity(t_grid.len()),
        t_prime,
    };
    for &t in t_grid {
        let i = grid_index(&path.times, t).min(end);
        let zs = stoch[end] - stoch[i];
        let zd = drift[end] - drift[i];
        let v = (-lin.lambda * t).exp() * c.sigma_tilde(path.states[i]);
        let v = if zs == T::zero() && zd == T::zero() {
            v
        } else {
            v * (eps * zs + half_eps2 * zd).exp()
        };
        trace.value.push(v);
        trace.z_stochastic.push(zs);
        trace.z_drift.push(zd);
    }
    Ok(trace)
}

/// Trapezoid value of `int |D_t M(T') - e^{-lambda t} sigma0|^2 dt` over the trace grid.
pub fn malliavin_l2_gap<T: Real>(trace: &MalliavinTrace<T>, lambda: T, sigma0: T) -> T {
    let gap = |k: usize| {
        let d = trace.value[k] - (-lambda * trace.t_grid[k]).exp() * sigma0;
        d * d
    };
    (1..trace.t_grid.len()).fold(T::zero(), |acc, k| {
        acc + lit::<T>(0.5) * (gap(k) + gap(k - 1)) * (trace.t_grid[k] - trace.t_grid[k - 1])
    })
}
