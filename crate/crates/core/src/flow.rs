//! Deterministic dynamics `x' = b(x)`: the flow, the deterministic exit time,
//! and the linearizing conjugation `f(x) = lim e^{lambda t} S^{-t} x` with its inverse.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ModelSpec, Side};
use crate::num::{lit, to_f64, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("invalid flow solver config: {0}")]
    Config(String),
    #[error("trajectory escaped the integration domain at t = {time} (x = {state})")]
    Escaped { time: f64, state: f64 },
    #[error("x = {0} lies outside the interval")]
    OutOfDomain(f64),
    #[error("the origin is an equilibrium and never exits")]
    AtEquilibrium,
    #[error("conjugation limit did not converge at x = {x} before t = {t_max}")]
    NonConvergence { x: f64, t_max: f64 },
    #[error("deterministic exit not reached from x = {x} before t = {t_max}")]
    NoExit { x: f64, t_max: f64 },
    #[error("y = {y} is outside the image [{lo}, {hi}] of the interval")]
    OutsideImage { y: f64, lo: f64, hi: f64 },
    #[error("conjugation table is not strictly increasing near x = {0}")]
    NotMonotone(f64),
    #[error("table needs at least 64 grid points, got {0}")]
    GridTooSmall(usize),
}

/// Step and tolerance for the fixed-step RK4 integrator and the limits built on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowSolverConfig<T> {
    pub dt: T,
    pub tol: T,
}

impl<T: Real> FlowSolverConfig<T> {
    pub fn new(dt: T, tol: T) -> Result<Self, FlowError> {
        if !(dt > T::zero() && dt <= lit(1e-3)) {
            return Err(FlowError::Config(format!("dt must lie in (0, 1e-3], got {dt}")));
        }
        if !(tol >= T::min_tolerance()) {
            return Err(FlowError::Config(format!(
                "tol must be at least {}, got {tol}",
                T::min_tolerance()
            )));
        }
        Ok(Self { dt, tol })
    }
}

impl<T: Real> Default for FlowSolverConfig<T> {
    fn default() -> Self {
        let tol = T::min_tolerance().max(lit(1e-11));
        Self { dt: lit(1e-3), tol }
    }
}

#[inline]
fn rk4_step<T: Real>(model: &ModelSpec<T>, x: T, h: T) -> T {
    let half = h * lit(0.5);
    let k1 = model.drift(x);
    let k2 = model.drift(x + half * k1);
    let k3 = model.drift(x + half * k2);
    let k4 = model.drift(x + h * k3);
    x + h / lit(6.0) * (k1 + lit::<T>(2.0) * (k2 + k3) + k4)
}

fn steps_for<T: Real>(span: T, dt: T) -> usize {
    let n = (span.abs() / dt - lit(1e-9)).ceil();
    to_f64(n).max(1.0) as usize
}

/// Approximates `S^t x0` (negative `t` runs the flow backward).
///
/// Integration aborts if the state leaves the interval enlarged by its own width.
pub fn integrate_flow<T: Real>(model: &ModelSpec<T>, x0: T, t: T, cfg: &FlowSolverConfig<T>) -> Result<T, FlowError> {
    if t == T::zero() {
        return Ok(x0);
    }
    let n = steps_for(t, cfg.dt);
    let h = t / lit(n as f64);
    let w = model.width();
    let (lo, hi) = (model.q_minus - w, model.q_plus + w);
    let mut x = x0;
    for i in 0..n {
        x = rk4_step(model, x, h);
        if !(x >= lo && x <= hi) {
            return Err(FlowError::Escaped {
                time: to_f64(h * lit((i + 1) as f64)),
                state: to_f64(x),
            });
        }
    }
    Ok(x)
}

/// Time `T(x)` for the flow started at `x != 0` to reach the boundary, and the endpoint reached.
pub fn deterministic_exit_time<T: Real>(
    model: &ModelSpec<T>,
    x: T,
    cfg: &FlowSolverConfig<T>,
) -> Result<(T, Side), FlowError> {
    if x == T::zero() {
        return Err(FlowError::AtEquilibrium);
    }
    if !(x > model.q_minus && x < model.q_plus) {
        return Err(FlowError::OutOfDomain(to_f64(x)));
    }
    let t_max: T = lit::<T>(1000.0) / model.lambda;
    let max_steps = to_f64(t_max / cfg.dt) as usize;
    let side = Side::of(x);
    let target = model.endpoint(side);
    let crossed = |v: T| match side {
        Side::Plus => v >= target,
        Side::Minus => v <= target,
    };
    let mut xc = x;
    for n in 0..max_steps {
        let next = rk4_step(model, xc, cfg.dt);
        if crossed(next) {
            // Bisect on the length of the final substep.
            let (mut lo, mut hi) = (T::zero(), cfg.dt);
            for _ in 0..200 {
                let mid = (lo + hi) * lit(0.5);
                let v = rk4_step(model, xc, mid);
                if (v - target).abs() < cfg.tol * lit(1e-3) {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if crossed(v) {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= T::epsilon() * cfg.dt {
                    break;
                }
            }
            let t = cfg.dt * lit(n as f64) + (lo + hi) * lit(0.5);
            return Ok((t, side));
        }
        xc = next;
    }
    Err(FlowError::NoExit {
        x: to_f64(x),
        t_max: to_f64(t_max),
    })
}

/// Backward-integration schedule for the conjugation limit: `1/lambda`, doubling,
/// capped at `50/lambda`.
fn horizon_schedule<T: Real>(lambda: T) -> Vec<T> {
    let t_max = lit::<T>(50.0) / lambda;
    let mut out = Vec::new();
    let mut t = T::one() / lambda;
    while t < t_max {
        out.push(t);
        t = t + t;
    }
    out.push(t_max);
    out
}

/// `f(x)` together with the horizon at which the limit was declared converged.
pub fn conjugation_with_horizon<T: Real>(
    model: &ModelSpec<T>,
    x: T,
    cfg: &FlowSolverConfig<T>,
) -> Result<(T, T), FlowError> {
    if x == T::zero() {
        return Ok((T::zero(), T::zero()));
    }
    if !model.contains(x) {
        return Err(FlowError::OutOfDomain(to_f64(x)));
    }
    let schedule = horizon_schedule(model.lambda);
    let mut t = T::zero();
    let mut y = x;
    let mut prev: Option<T> = None;
    for &target in &schedule {
        y = integrate_flow(model, y, t - target, cfg)?;
        t = target;
        let v = (model.lambda * t).exp() * y;
        if let Some(p) = prev {
            if (v - p).abs() < cfg.tol {
                return Ok((v, t));
            }
        }
        prev = Some(v);
    }
    Err(FlowError::NonConvergence {
        x: to_f64(x),
        t_max: to_f64(t),
    })
}

/// `e^{lambda t} S^{-t} x` at a fixed schedule horizon, using the same step
/// pattern as [`conjugation_with_horizon`] so nearby points share a discretization.
pub fn conjugation_at_horizon<T: Real>(
    model: &ModelSpec<T>,
    x: T,
    horizon: T,
    cfg: &FlowSolverConfig<T>,
) -> Result<T, FlowError> {
    if x == T::zero() || horizon == T::zero() {
        return Ok(x);
    }
    let mut t = T::zero();
    let mut y = x;
    for target in horizon_schedule(model.lambda) {
        if target > horizon + T::epsilon() * horizon {
            break;
        }
        y = integrate_flow(model, y, t - target, cfg)?;
        t = target;
    }
    Ok((model.lambda * t).exp() * y)
}

/// The linearizing conjugation `f(x)`, with `f(0) = 0` exactly.
pub fn conjugation<T: Real>(model: &ModelSpec<T>, x: T, cfg: &FlowSolverConfig<T>) -> Result<T, FlowError> {
    conjugation_with_horizon(model, x, cfg).map(|(v, _)| v)
}

/// `f` sampled on a uniform grid over the interval.
#[derive(Debug, Clone, Serialize)]
pub struct ConjugationTable<T> {
    pub grid: Vec<T>,
    pub f_values: Vec<T>,
    pub f_qminus: T,
    pub f_qplus: T,
}

impl<T: Real> ConjugationTable<T> {
    fn from_values(grid: Vec<T>, f_values: Vec<T>) -> Result<Self, FlowError> {
        for w in grid.windows(2).zip(f_values.windows(2)) {
            if !(w.1[1] > w.1[0]) {
                return Err(FlowError::NotMonotone(to_f64(w.0[0])));
            }
        }
        let f_qminus = f_values[0];
        let f_qplus = *f_values.last().unwrap();
        Ok(Self {
            grid,
            f_values,
            f_qminus,
            f_qplus,
        })
    }

    /// Grid cell `[x_i, x_{i+1}]` whose image brackets `y`.
    fn bracket(&self, y: T) -> (T, T) {
        let i = self.f_values.partition_point(|&v| v <= y);
        let i = i.clamp(1, self.f_values.len() - 1);
        (self.grid[i - 1], self.grid[i])
    }

    /// Piecewise-linear interpolation of `f`.
    pub fn interpolate(&self, x: T) -> T {
        let i = self.grid.partition_point(|&g| g <= x).clamp(1, self.grid.len() - 1);
        let (x0, x1) = (self.grid[i - 1], self.grid[i]);
        let (f0, f1) = (self.f_values[i - 1], self.f_values[i]);
        f0 + (f1 - f0) * (x - x0) / (x1 - x0)
    }
}

fn uniform_grid<T: Real>(a: T, b: T, n: usize) -> Vec<T> {
    let step = (b - a) / lit((n - 1) as f64);
    (0..n)
        .map(|i| if i == n - 1 { b } else { a + step * lit(i as f64) })
        .collect()
}

/// Tabulates `f` on `n_grid` uniform points spanning the interval.
pub fn build_conjugation_table<T: Real>(
    model: &ModelSpec<T>,
    n_grid: usize,
    cfg: &FlowSolverConfig<T>,
) -> Result<ConjugationTable<T>, FlowError> {
    if n_grid < 64 {
        return Err(FlowError::GridTooSmall(n_grid));
    }
    let grid = uniform_grid(model.q_minus, model.q_plus, n_grid);
    let f_values = grid
        .par_iter()
        .map(|&x| conjugation(model, x, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    ConjugationTable::from_values(grid, f_values)
}

/// `g(y) = f^{-1}(y)`: table bracketing, then bisection on `f` itself.
pub fn inverse_conjugation<T: Real>(
    model: &ModelSpec<T>,
    table: &ConjugationTable<T>,
    y: T,
    cfg: &FlowSolverConfig<T>,
) -> Result<T, FlowError> {
    if y == T::zero() {
        return Ok(T::zero());
    }
    if !(y >= table.f_qminus && y <= table.f_qplus) {
        return Err(FlowError::OutsideImage {
            y: to_f64(y),
            lo: to_f64(table.f_qminus),
            hi: to_f64(table.f_qplus),
        });
    }
    let (mut lo, mut hi) = table.bracket(y);
    let mut mid = (lo + hi) * lit(0.5);
    // At least 20 halvings; then continue until f matches y to tol.
    for it in 0..80 {
        mid = (lo + hi) * lit(0.5);
        let v = conjugation(model, mid, cfg)?;
        if it >= 20 && (v - y).abs() < cfg.tol {
            break;
        }
        if v < y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= T::epsilon() * mid.abs().max(T::one()) {
            break;
        }
    }
    Ok(mid)
}

/// Cached conjugation for a model.
///
/// Exactly linear drifts (`eta = 0` on the grid) use the identity map; all
/// other drifts evaluate the backward-flow limit on demand.
#[derive(Debug, Clone)]
pub struct Conjugation<T> {
    model: ModelSpec<T>,
    cfg: FlowSolverConfig<T>,
    table: ConjugationTable<T>,
    identity: bool,
}

impl<T: Real> Conjugation<T> {
    pub fn build(model: &ModelSpec<T>, n_grid: usize, cfg: FlowSolverConfig<T>) -> Result<Self, FlowError> {
        let identity = model.is_linear_drift();
        let table = if identity {
            if n_grid < 64 {
                return Err(FlowError::GridTooSmall(n_grid));
            }
            let grid = uniform_grid(model.q_minus, model.q_plus, n_grid);
            ConjugationTable::from_values(grid.clone(), grid)?
        } else {
            build_conjugation_table(model, n_grid, &cfg)?
        };
        Ok(Self {
            model: model.clone(),
            cfg,
            table,
            identity,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn table(&self) -> &ConjugationTable<T> {
        &self.table
    }

    pub fn model(&self) -> &ModelSpec<T> {
        &self.model
    }

    pub fn config(&self) -> &FlowSolverConfig<T> {
        &self.cfg
    }

    pub fn f_qminus(&self) -> T {
        self.table.f_qminus
    }

    pub fn f_qplus(&self) -> T {
        self.table.f_qplus
    }

    pub fn f(&self, x: T) -> Result<T, FlowError> {
        if self.identity {
            if !self.model.contains(x) {
                return Err(FlowError::OutOfDomain(to_f64(x)));
            }
            return Ok(x);
        }
        conjugation(&self.model, x, &self.cfg)
    }

    pub fn g(&self, y: T) -> Result<T, FlowError> {
        if self.identity {
            if !(y >= self.table.f_qminus && y <= self.table.f_qplus) {
                return Err(FlowError::OutsideImage {
                    y: to_f64(y),
                    lo: to_f64(self.table.f_qminus),
                    hi: to_f64(self.table.f_qplus),
                });
            }
            return Ok(y);
        }
        inverse_conjugation(&self.model, &self.table, y, &self.cfg)
    }

    /// `(f, f', f'')` at `x` by central differences with step `h`, all three
    /// evaluations sharing the backward-integration horizon of the center point.
    pub fn derivatives(&self, x: T, h: T) -> Result<(T, T, T), FlowError> {
        if self.identity {
            return Ok((x, T::one(), T::zero()));
        }
        let probe = if x == T::zero() { h } else { x };
        let (_, horizon) = conjugation_with_horizon(&self.model, probe, &self.cfg)?;
        let horizon = horizon.max(T::one() / self.model.lambda);
        let at = |u: T| conjugation_at_horizon(&self.model, u, horizon, &self.cfg);
        let (fm, f0, fp) = (at(x - h)?, at(x)?, at(x + h)?);
        Ok((f0, (fp - fm) / (h + h), (fp - f0 - f0 + fm) / (h * h)))
    }
}
