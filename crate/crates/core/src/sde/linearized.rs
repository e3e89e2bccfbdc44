//! Simulation in conjugated coordinates `Y = f(X)`:
//!
//! `dY = lambda Y dt + eps s(Y) dW + (eps^2/2) h(Y) dt`, with
//! `s(y) = f'(g(y)) sigma(g(y))` and `h(y) = f''(g(y)) sigma(g(y))^2`.
//!
//! The scheme advances the Duhamel factor `M = x + U + V` and sets
//! `Y(t) = eps e^{lambda t} M(t)`, so the representation holds exactly on the grid.

use rayon::prelude::*;
use serde::Serialize;

use super::{steps_for, ExitRecord, Path, SimConfig, SimError};
use crate::expr::ScalarFunction;
use crate::flow::{Conjugation, FlowError};
use crate::model::{ModelSpec, Neighborhood, Side};
use crate::num::{lit, to_f64, Real};
use crate::rng::NoiseSource;

const X_NODES: usize = 257;
const Y_NODES: usize = 1025;

/// `s`, `h` and their derivatives on `[-R, R]`, frozen at their `|y| = R`
/// values outside (derivatives vanish there).
#[derive(Debug, Clone)]
pub enum LinearizedCoefficients<T> {
    /// Linear drift: `f` is the identity, `s = sigma`, `h = 0`.
    Identity { sigma: ScalarFunction, r: T, step: T },
    /// Tabulated on a uniform `y` grid.
    Table {
        r: T,
        step: T,
        sigma_tilde: Vec<T>,
        h: Vec<T>,
        dsigma: Vec<T>,
        dh: Vec<T>,
    },
}

impl<T: Real> LinearizedCoefficients<T> {
    /// Central differences of `f` use step `1e-4 R`.
    pub fn build(conj: &Conjugation<T>, nbhd: &Neighborhood<T>) -> Result<Self, FlowError> {
        let model = conj.model();
        let r = nbhd.r;
        let diff_step = r * lit(1e-4);
        if conj.is_identity() {
            return Ok(Self::Identity {
                sigma: model.sigma.clone(),
                r,
                step: diff_step,
            });
        }
        let dx = (nbhd.v_plus - nbhd.v_minus) / lit((X_NODES - 1) as f64);
        let nodes = (0..X_NODES)
            .into_par_iter()
            .map(|i| {
                let x = if i == X_NODES - 1 {
                    nbhd.v_plus
                } else {
                    nbhd.v_minus + dx * lit(i as f64)
                };
                let (f, fp, fpp) = conj.derivatives(x, diff_step)?;
                let s = model.diffusion(x);
                Ok((f, fp * s, fpp * s * s))
            })
            .collect::<Result<Vec<_>, FlowError>>()?;
        let ys: Vec<T> = nodes.iter().map(|n| n.0).collect();
        let step = (r + r) / lit((Y_NODES - 1) as f64);
        let mut sigma_tilde = Vec::with_capacity(Y_NODES);
        let mut h = Vec::with_capacity(Y_NODES);
        for k in 0..Y_NODES {
            let y = -r + step * lit(k as f64);
            let i = ys.partition_point(|&v| v <= y).clamp(1, X_NODES - 1);
            let w = ((y - ys[i - 1]) / (ys[i] - ys[i - 1])).max(T::zero()).min(T::one());
            sigma_tilde.push(nodes[i - 1].1 + w * (nodes[i].1 - nodes[i - 1].1));
            h.push(nodes[i - 1].2 + w * (nodes[i].2 - nodes[i - 1].2));
        }
        let gradient = |v: &[T]| -> Vec<T> {
            let n = v.len();
            (0..n)
                .map(|k| match k {
                    0 => (v[1] - v[0]) / step,
                    k if k == n - 1 => (v[n - 1] - v[n - 2]) / step,
                    k => (v[k + 1] - v[k - 1]) / (step + step),
                })
                .collect()
        };
        let dsigma = gradient(&sigma_tilde);
        let dh = gradient(&h);
        Ok(Self::Table {
            r,
            step,
            sigma_tilde,
            h,
            dsigma,
            dh,
        })
    }

    pub fn radius(&self) -> T {
        match self {
            Self::Identity { r, .. } | Self::Table { r, .. } => *r,
        }
    }

    #[inline]
    fn locate(r: T, step: T, len: usize, y: T) -> (usize, T) {
        let u = ((y.max(-r).min(r) + r) / step).max(T::zero());
        let k = to_f64(u.floor()) as usize;
        if k >= len - 1 {
            (len - 2, T::one())
        } else {
            (k, u - lit(k as f64))
        }
    }

    #[inline]
    fn interp(v: &[T], k: usize, w: T) -> T {
        v[k] + w * (v[k + 1] - v[k])
    }

    #[inline]
    pub fn sigma_tilde(&self, y: T) -> T {
        match self {
            Self::Identity { sigma, r, .. } => sigma.eval(y.max(-*r).min(*r)),
            Self::Table {
                r, step, sigma_tilde, ..
            } => {
                let (k, w) = Self::locate(*r, *step, sigma_tilde.len(), y);
                Self::interp(sigma_tilde, k, w)
            }
        }
    }

    #[inline]
    pub fn h(&self, y: T) -> T {
        match self {
            Self::Identity { .. } => T::zero(),
            Self::Table { r, step, h, .. } => {
                let (k, w) = Self::locate(*r, *step, h.len(), y);
                Self::interp(h, k, w)
            }
        }
    }

    #[inline]
    pub fn sigma_tilde_prime(&self, y: T) -> T {
        match self {
            Self::Identity { sigma, r, step } => {
                if y.abs() > *r {
                    T::zero()
                } else {
                    sigma.derivative(y, *step)
                }
            }
            Self::Table { r, step, dsigma, .. } => {
                if y.abs() > *r {
                    return T::zero();
                }
                let (k, w) = Self::locate(*r, *step, dsigma.len(), y);
                Self::interp(dsigma, k, w)
            }
        }
    }

    #[inline]
    pub fn h_prime(&self, y: T) -> T {
        match self {
            Self::Identity { .. } => T::zero(),
            Self::Table { r, step, dh, .. } => {
                if y.abs() > *r {
                    return T::zero();
                }
                let (k, w) = Self::locate(*r, *step, dh.len(), y);
                Self::interp(dh, k, w)
            }
        }
    }

    pub fn has_drift_correction(&self) -> bool {
        matches!(self, Self::Table { .. })
    }

    /// `sup |h|` over `[-R, R]`.
    pub fn h_sup(&self) -> T {
        match self {
            Self::Identity { .. } => T::zero(),
            Self::Table { h, .. } => h.iter().fold(T::zero(), |m, v| m.max(v.abs())),
        }
    }

    /// `sup s` over `[-R, R]` (1001-point grid).
    pub fn sigma_tilde_sup(&self) -> T {
        let r = self.radius();
        (0..=1000)
            .map(|k| self.sigma_tilde(-r + (r + r) * lit(k as f64 / 1000.0)))
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Everything the linearized simulation needs.
#[derive(Debug, Clone)]
pub struct LinearizedModel<T> {
    pub lambda: T,
    pub sigma0: T,
    pub nbhd: Neighborhood<T>,
    pub coeffs: LinearizedCoefficients<T>,
}

impl<T: Real> LinearizedModel<T> {
    pub fn build(model: &ModelSpec<T>, conj: &Conjugation<T>, nbhd: Neighborhood<T>) -> Result<Self, FlowError> {
        Ok(Self {
            lambda: model.lambda,
            sigma0: model.sigma0(),
            coeffs: LinearizedCoefficients::build(conj, &nbhd)?,
            nbhd,
        })
    }

    pub fn r(&self) -> T {
        self.nbhd.r
    }
}

/// How long to run the linearized process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinHorizon<T> {
    /// Stop at the exit from `[-R, R]` (or `max_time`).
    UntilExit,
    /// Run to a fixed time, continuing past the exit with frozen coefficients.
    Fixed(T),
}

/// First exit of `Y` from `[-R, R]`, with the Duhamel terms at that time.
///
/// `side` is the sign of the first grid state with `|Y| >= R`; `m`, `u`, `v` are
/// interpolated to the crossing time `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NeighborhoodExit<T> {
    pub tau: T,
    pub side: Side,
    pub m: T,
    pub u: T,
    pub v: T,
}

/// `M = x + U + V` along a linearized path.
#[derive(Debug, Clone, Serialize)]
pub struct DuhamelTrace<T> {
    pub times: Vec<T>,
    #[serde(rename = "M")]
    pub m: Vec<T>,
    #[serde(rename = "U")]
    pub u: Vec<T>,
    #[serde(rename = "V")]
    pub v: Vec<T>,
    pub x0_lin: T,
    pub exit: Option<NeighborhoodExit<T>>,
}

#[derive(Debug, Clone, Copy)]
struct State<T> {
    t: T,
    u: T,
    v: T,
    m: T,
    y: T,
}

struct Stepper<'a, T> {
    lin: &'a LinearizedModel<T>,
    eps: T,
    x: T,
    half_eps: T,
}

impl<'a, T: Real> Stepper<'a, T> {
    fn new(lin: &'a LinearizedModel<T>, eps: T, x: T) -> Self {
        Self {
            lin,
            eps,
            x,
            half_eps: eps * lit(0.5),
        }
    }

    fn start(&self) -> State<T> {
        State {
            t: T::zero(),
            u: T::zero(),
            v: T::zero(),
            m: self.x,
            y: self.eps * self.x,
        }
    }

    /// One step: Ito sum for `U`, Heun-trapezoid for `V`.
    #[inline]
    fn step(&self, s: &State<T>, h: T, t_next: T, dw: T) -> State<T> {
        let lambda = self.lin.lambda;
        let c = &self.lin.coeffs;
        let decay = (-lambda * s.t).exp();
        let u = s.u + decay * c.sigma_tilde(s.y) * dw;
        let v = if c.has_drift_correction() {
            let decay_next = (-lambda * t_next).exp();
            let drift_now = decay * c.h(s.y);
            let m_pred = self.x + u + s.v + self.half_eps * drift_now * h;
            let y_pred = self.eps * (lambda * t_next).exp() * m_pred;
            s.v + self.half_eps * h * lit(0.5) * (drift_now + decay_next * c.h(y_pred))
        } else {
            s.v
        };
        let m = self.x + u + v;
        State {
            t: t_next,
            u,
            v,
            m,
            y: self.eps * (lambda * t_next).exp() * m,
        }
    }

    /// Root of `eps e^{lambda t} |M(t)| = R` with `M` linear on the step.
    fn crossing(&self, a: &State<T>, b: &State<T>) -> NeighborhoodExit<T> {
        let r = self.lin.r();
        let lambda = self.lin.lambda;
        let dt = b.t - a.t;
        let lerp = |p: T, q: T, w: T| p + w * (q - p);
        let phi = |w: T| self.eps * (lambda * (a.t + w * dt)).exp() * lerp(a.m, b.m, w).abs() - r;
        let mut lo = T::zero();
        if (a.m < T::zero()) != (b.m < T::zero()) {
            lo = a.m / (a.m - b.m);
        }
        let mut hi = T::one();
        for _ in 0..200 {
            let mid = (lo + hi) * lit(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            if phi(mid) < T::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let w = hi;
        let m = lerp(a.m, b.m, w);
        NeighborhoodExit {
            tau: a.t + w * dt,
            side: Side::of(b.y),
            m,
            u: lerp(a.u, b.u, w),
            v: lerp(a.v, b.v, w),
        }
    }
}

fn check_start<T: Real>(lin: &LinearizedModel<T>, eps: T, x: T) -> Result<(), SimError> {
    if !((eps * x).abs() < lin.r()) {
        return Err(SimError::OutOfDomain(to_f64(eps * x)));
    }
    Ok(())
}

fn run<T: Real, N: NoiseSource<T> + ?Sized>(
    lin: &LinearizedModel<T>,
    x_lin: T,
    eps: T,
    horizon: LinHorizon<T>,
    cfg: &SimConfig<T>,
    noise: &mut N,
    mut observe: impl FnMut(&State<T>, T),
) -> Result<(State<T>, Option<NeighborhoodExit<T>>), SimError> {
    check_start(lin, eps, x_lin)?;
    let stepper = Stepper::new(lin, eps, x_lin);
    let end = match horizon {
        LinHorizon::UntilExit => cfg.max_time,
        LinHorizon::Fixed(t) => t,
    };
    let mut s = stepper.start();
    observe(&s, T::zero());
    let n = steps_for(end, cfg.dt);
    let h = end / lit(n as f64);
    let r = lin.r();
    let mut exit = None;
    for i in 0..n {
        let t_next = if i + 1 == n { end } else { h * lit((i + 1) as f64) };
        let dw = noise.increment(h).ok_or(SimError::NoiseExhausted(to_f64(s.t)))?;
        let next = stepper.step(&s, t_next - s.t, t_next, dw);
        if !next.m.is_finite() {
            return Err(SimError::NonFinite { time: to_f64(t_next) });
        }
        if exit.is_none() && next.y.abs() >= r {
            exit = Some(stepper.crossing(&s, &next));
            if horizon == LinHorizon::UntilExit {
                observe(&next, dw);
                return Ok((next, exit));
            }
        }
        observe(&next, dw);
        s = next;
    }
    Ok((s, exit))
}

/// Stored linearized path (in `Y` coordinates) with its Duhamel trace.
///
/// Starts from `Y(0) = eps x_lin`, which requires `|eps x_lin| < R`.
pub fn simulate_linearized<T: Real, N: NoiseSource<T> + ?Sized>(
    lin: &LinearizedModel<T>,
    x_lin: T,
    eps: T,
    horizon: LinHorizon<T>,
    cfg: &SimConfig<T>,
    noise: &mut N,
) -> Result<(Path<T>, DuhamelTrace<T>), SimError> {
    let mut times = Vec::new();
    let mut ys = Vec::new();
    let mut dws = Vec::new();
    let (mut ms, mut us, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    let mut first = true;
    let (_, exit) = run(lin, x_lin, eps, horizon, cfg, noise, |s, dw| {
        times.push(s.t);
        ys.push(s.y);
        ms.push(s.m);
        us.push(s.u);
        vs.push(s.v);
        if !first {
            dws.push(dw);
        }
        first = false;
    })?;
    let path = Path {
        times: times.clone(),
        states: ys,
        dw: dws,
        exit: exit.map(|e| ExitRecord {
            tau: e.tau,
            side: e.side,
            crossed_neighborhood: Some((e.tau, e.side)),
        }),
    };
    let trace = DuhamelTrace {
        times,
        m: ms,
        u: us,
        v: vs,
        x0_lin: x_lin,
        exit,
    };
    Ok((path, trace))
}

/// State of a linearized path at a fixed time, without storage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedEnd<T> {
    pub m: T,
    pub y: T,
    pub exit: Option<NeighborhoodExit<T>>,
}

/// Runs to `t_end` (past the exit from `[-R, R]` if needed) and returns `M(t_end)`.
pub fn linearized_endpoint<T: Real, N: NoiseSource<T> + ?Sized>(
    lin: &LinearizedModel<T>,
    x_lin: T,
    eps: T,
    t_end: T,
    cfg: &SimConfig<T>,
    noise: &mut N,
) -> Result<LinearizedEnd<T>, SimError> {
    let (s, exit) = run(lin, x_lin, eps, LinHorizon::Fixed(t_end), cfg, noise, |_, _| {})?;
    Ok(LinearizedEnd { m: s.m, y: s.y, exit })
}

/// Exit from `[-R, R]`; `None` when censored at `cfg.max_time`.
pub fn linearized_exit<T: Real, N: NoiseSource<T> + ?Sized>(
    lin: &LinearizedModel<T>,
    x_lin: T,
    eps: T,
    cfg: &SimConfig<T>,
    noise: &mut N,
) -> Result<Option<NeighborhoodExit<T>>, SimError> {
    run(lin, x_lin, eps, LinHorizon::UntilExit, cfg, noise, |_, _| {}).map(|(_, e)| e)
}
