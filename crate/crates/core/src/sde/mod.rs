//! Path simulation of `dX = b(X) dt + eps sigma(X) dW` on the interval, exit
//! detection, and the linearized (Duhamel) simulation in conjugated coordinates.

mod linearized;
mod malliavin;

pub use linearized::{
    linearized_endpoint, linearized_exit, simulate_linearized, DuhamelTrace, LinHorizon, LinearizedCoefficients,
    LinearizedEnd, LinearizedModel, NeighborhoodExit,
};
pub use malliavin::{malliavin_derivative, malliavin_l2_gap, MalliavinTrace};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelSpec, Neighborhood, Side};
use crate::num::{lit, to_f64, Real};
use crate::rng::{NoiseSource, PathStream, StreamKey};

const SIGMA_DERIVATIVE_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("state became non-finite at t = {time}")]
    NonFinite { time: f64 },
    #[error("start {0} lies outside the simulation domain")]
    OutOfDomain(f64),
    #[error("noise source exhausted at t = {0}")]
    NoiseExhausted(f64),
    #[error("requested time {requested} is beyond the path horizon {horizon}")]
    BeyondHorizon { requested: f64, horizon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Euler,
    Milstein,
}

/// Time step, noise level, scheme and censoring horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig<T> {
    pub dt: T,
    pub epsilon: T,
    pub scheme: Scheme,
    pub max_time: T,
}

impl<T: Real> SimConfig<T> {
    pub fn new(dt: T, epsilon: T, scheme: Scheme, max_time: T) -> Result<Self, SimError> {
        if !(dt > T::zero() && dt <= lit(0.01)) {
            return Err(SimError::Config(format!("dt must lie in (0, 0.01], got {dt}")));
        }
        if !(epsilon > T::zero() && epsilon < T::one()) {
            return Err(SimError::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        if !(max_time > T::zero()) || !max_time.is_finite() {
            return Err(SimError::Config(format!("max_time must be positive, got {max_time}")));
        }
        Ok(Self {
            dt,
            epsilon,
            scheme,
            max_time,
        })
    }

    /// Euler config with the default censoring horizon.
    pub fn euler(dt: T, epsilon: T, lambda: T) -> Result<Self, SimError> {
        Self::new(dt, epsilon, Scheme::Euler, Self::default_max_time(epsilon, lambda))
    }

    /// `(2/lambda) log(1/eps) + 10/lambda`.
    pub fn default_max_time(epsilon: T, lambda: T) -> T {
        (lit::<T>(2.0) * epsilon.recip().ln() + lit(10.0)) / lambda
    }

    /// Zero-noise config; the path then follows the Euler discretization of the flow.
    pub fn noiseless(dt: T, max_time: T) -> Self {
        Self {
            dt,
            epsilon: T::zero(),
            scheme: Scheme::Euler,
            max_time,
        }
    }

    pub fn with_max_time(mut self, max_time: T) -> Self {
        self.max_time = max_time;
        self
    }
}

/// Exit from the interval, optionally with the earlier exit from the neighborhood `V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitRecord<T> {
    pub tau: T,
    pub side: Side,
    pub crossed_neighborhood: Option<(T, Side)>,
}

/// A stored trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct Path<T> {
    pub times: Vec<T>,
    pub states: Vec<T>,
    /// `dw[i]` drives the step from `times[i]` to `times[i + 1]`.
    pub dw: Vec<T>,
    pub exit: Option<ExitRecord<T>>,
}

impl<T: Real> Path<T> {
    pub fn horizon(&self) -> T {
        *self.times.last().unwrap()
    }

    pub fn censored(&self) -> bool {
        self.exit.is_none()
    }
}

/// Result of running a path between two times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Advance<T> {
    Survived(T),
    Exited { tau: T, side: Side },
}

#[inline]
pub(crate) fn steps_for<T: Real>(span: T, dt: T) -> usize {
    let n = to_f64((span / dt - lit(1e-9)).ceil());
    n.max(1.0) as usize
}

#[inline]
fn x_step<T: Real>(model: &ModelSpec<T>, x: T, h: T, dw: T, eps: T, scheme: Scheme) -> T {
    let s = model.diffusion(x);
    let mut next = x + model.drift(x) * h + eps * s * dw;
    if scheme == Scheme::Milstein {
        let ds = model.sigma.derivative(x, lit(SIGMA_DERIVATIVE_STEP));
        next = next + lit::<T>(0.5) * eps * eps * s * ds * (dw * dw - h);
    }
    next
}

enum RunEnd<T> {
    Survived(T),
    Exited { tau: T, side: Side },
}

/// Steps from `t0` to `t1` with `observe(t, x, dw)` called after every step.
fn run_x<T: Real, N: NoiseSource<T> + ?Sized>(
    model: &ModelSpec<T>,
    x0: T,
    t0: T,
    t1: T,
    cfg: &SimConfig<T>,
    noise: &mut N,
    mut observe: impl FnMut(T, T, T),
) -> Result<RunEnd<T>, SimError> {
    if !(x0 >= model.q_minus && x0 <= model.q_plus) {
        return Err(SimError::OutOfDomain(to_f64(x0)));
    }
    if x0 == model.q_plus {
        return Ok(RunEnd::Exited { tau: t0, side: Side::Plus });
    }
    if x0 == model.q_minus {
        return Ok(RunEnd::Exited { tau: t0, side: Side::Minus });
    }
    if t1 <= t0 {
        return Ok(RunEnd::Survived(x0));
    }
    let n = steps_for(t1 - t0, cfg.dt);
    let h = (t1 - t0) / lit(n as f64);
    let mut x = x0;
    for i in 0..n {
        let t = t0 + h * lit(i as f64);
        let dw = noise.increment(h).ok_or(SimError::NoiseExhausted(to_f64(t)))?;
        let next = x_step(model, x, h, dw, cfg.epsilon, cfg.scheme);
        if !next.is_finite() {
            return Err(SimError::NonFinite { time: to_f64(t) });
        }
        let t_next = if i + 1 == n { t1 } else { t + h };
        observe(t_next, next, dw);
        let boundary = if next >= model.q_plus {
            Some((model.q_plus, Side::Plus))
        } else if next <= model.q_minus {
            Some((model.q_minus, Side::Minus))
        } else {
            None
        };
        if let Some((q, side)) = boundary {
            let theta = (q - x) / (next - x);
            return Ok(RunEnd::Exited { tau: t + theta * h, side });
        }
        x = next;
    }
    Ok(RunEnd::Survived(x))
}

/// Simulates one stored path from `x0` until exit or `cfg.max_time`.
///
/// The exit time is refined by linear interpolation within the crossing step.
pub fn simulate_path<T: Real, N: NoiseSource<T> + ?Sized>(
    model: &ModelSpec<T>,
    x0: T,
    cfg: &SimConfig<T>,
    noise: &mut N,
) -> Result<Path<T>, SimError> {
    let cap = to_f64(cfg.max_time / cfg.dt) as usize + 2;
    let mut times = Vec::with_capacity(cap.min(1 << 20));
    let mut states = Vec::with_capacity(cap.min(1 << 20));
    let mut dws = Vec::with_capacity(cap.min(1 << 20));
    times.push(T::zero());
    states.push(x0);
    let end = run_x(model, x0, T::zero(), cfg.max_time, cfg, noise, |t, x, dw| {
        times.push(t);
        states.push(x);
        dws.push(dw);
    })?;
    let exit = match end {
        RunEnd::Survived(_) => None,
        RunEnd::Exited { tau, side } => Some(ExitRecord {
            tau,
            side,
            crossed_neighborhood: None,
        }),
    };
    Ok(Path {
        times,
        states,
        dw: dws,
        exit,
    })
}

/// As [`simulate_path`], also recording the first exit from `V = [v_minus, v_plus]`.
pub fn simulate_path_watching<T: Real, N: NoiseSource<T> + ?Sized>(
    model: &ModelSpec<T>,
    nbhd: &Neighborhood<T>,
    x0: T,
    cfg: &SimConfig<T>,
    noise: &mut N,
) -> Result<Path<T>, SimError> {
    let mut path = simulate_path(model, x0, cfg, noise)?;
    let inside = |x: T| x > nbhd.v_minus && x < nbhd.v_plus;
    let mut crossing = None;
    if !inside(x0) {
        crossing = Some((T::zero(), Side::of(x0)));
    } else {
        for i in 1..path.states.len() {
            let x = path.states[i];
            if !inside(x) {
                let (q, side) = if x >= nbhd.v_plus {
                    (nbhd.v_plus, Side::Plus)
                } else {
                    (nbhd.v_minus, Side::Minus)
                };
                let xp = path.states[i - 1];
                let theta = (q - xp) / (x - xp);
                let (tp, tn) = (path.times[i - 1], path.times[i]);
                crossing = Some((tp + theta * (tn - tp), side));
                break;
            }
        }
    }
    if let Some(rec) = path.exit.as_mut() {
        rec.crossed_neighborhood = crossing;
    }
    Ok(path)
}

/// Runs from `x` at time `t_from` to `t_to` without storing the path.
pub fn advance<T: Real, N: NoiseSource<T> + ?Sized>(
    model: &ModelSpec<T>,
    x: T,
    t_from: T,
    t_to: T,
    cfg: &SimConfig<T>,
    noise: &mut N,
) -> Result<Advance<T>, SimError> {
    Ok(match run_x(model, x, t_from, t_to, cfg, noise, |_, _, _| {})? {
        RunEnd::Survived(x) => Advance::Survived(x),
        RunEnd::Exited { tau, side } => Advance::Exited { tau, side },
    })
}

/// Exit of a path started at `x` at time `t_from`; `None` when censored at `cfg.max_time`.
pub fn exit_from<T: Real, N: NoiseSource<T> + ?Sized>(
    model: &ModelSpec<T>,
    x: T,
    t_from: T,
    cfg: &SimConfig<T>,
    noise: &mut N,
) -> Result<Option<(T, Side)>, SimError> {
    Ok(match advance(model, x, t_from, cfg.max_time, cfg, noise)? {
        Advance::Survived(_) => None,
        Advance::Exited { tau, side } => Some((tau, side)),
    })
}

/// Exit times and sides of independent paths; `side` is `None` for censored paths.
#[derive(Debug, Clone, Serialize)]
pub struct ExitSample {
    pub tau: Vec<f64>,
    pub side: Vec<Option<Side>>,
}

impl ExitSample {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn censored(&self) -> usize {
        self.side.iter().filter(|s| s.is_none()).count()
    }

    pub fn count(&self, side: Side) -> usize {
        self.side.iter().filter(|s| **s == Some(side)).count()
    }

    fn exited_taus(&self) -> impl Iterator<Item = f64> + '_ {
        self.tau.iter().zip(&self.side).filter(|(_, s)| s.is_some()).map(|(t, _)| *t)
    }

    pub fn mean_tau(&self) -> f64 {
        let n = self.len() - self.censored();
        self.exited_taus().sum::<f64>() / n as f64
    }

    pub fn std_tau(&self) -> f64 {
        let n = (self.len() - self.censored()) as f64;
        let m = self.mean_tau();
        (self.exited_taus().map(|t| (t - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }
}

/// `n` independent exits from `x0`; path `j` uses stream `(seed, 0, j)`.
pub fn exit_summary<T: Real>(
    model: &ModelSpec<T>,
    x0: T,
    cfg: &SimConfig<T>,
    n: usize,
    seed: u64,
) -> Result<ExitSample, SimError> {
    let results = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut stream = PathStream::new(StreamKey::path(seed, j as u64));
            exit_from(model, x0, T::zero(), cfg, &mut stream)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (tau, side) = results
        .into_iter()
        .map(|r| match r {
            Some((t, s)) => (to_f64(t), Some(s)),
            None => (to_f64(cfg.max_time), None),
        })
        .unzip();
    Ok(ExitSample { tau, side })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, ModelInput};
    use crate::presets;
    use crate::rng::Replay;

    fn model(name: &str) -> ModelSpec<f64> {
        validate_model(&ModelInput::from_json(presets::preset(name).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(0.02, 0.1, Scheme::Euler, 5.0).is_err());
        assert!(SimConfig::new(1e-3, 1.0, Scheme::Euler, 5.0).is_err());
        assert!(SimConfig::new(1e-3, 0.1, Scheme::Euler, 0.0).is_err());
        let cfg = SimConfig::euler(1e-3, 0.1, 1.0).unwrap();
        assert!(cfg.max_time >= 2.0 * 10f64.ln());
    }

    #[test]
    fn zero_noise_follows_the_flow() {
        let m = model("linear-ou");
        let cfg = SimConfig::noiseless(1e-4, 2.0);
        let mut s = PathStream::new(StreamKey::path(0, 0));
        let p = simulate_path(&m, 0.1, &cfg, &mut s).unwrap();
        for (t, x) in p.times.iter().zip(&p.states) {
            assert!((x - 0.1 * t.exp()).abs() <= 1e-3, "t={t}");
        }
        assert!(p.censored());
        assert_eq!(p.states.len(), p.times.len());
        assert_eq!(p.dw.len(), p.times.len() - 1);
    }

    #[test]
    fn start_on_boundary_exits_immediately() {
        let m = model("cubic");
        let cfg = SimConfig::euler(1e-3, 0.1, 1.0).unwrap();
        let mut s = PathStream::new(StreamKey::path(0, 0));
        let p = simulate_path(&m, 0.7, &cfg, &mut s).unwrap();
        let e = p.exit.unwrap();
        assert_eq!((e.tau, e.side), (0.0, Side::Plus));
        let q = exit_summary(&m, -0.7, &cfg, 10, 1).unwrap();
        assert!(q.tau.iter().all(|&t| t == 0.0));
        assert_eq!(q.count(Side::Minus), 10);
        assert!(simulate_path(&m, 0.8, &cfg, &mut s).is_err());
    }

    #[test]
    fn exit_time_is_interpolated_within_the_crossing_step() {
        let m = model("linear-ou");
        let cfg = SimConfig::new(0.01, 0.5, Scheme::Euler, 10.0).unwrap();
        let mut s = PathStream::new(StreamKey::path(3, 0));
        let p = simulate_path(&m, 0.2, &cfg, &mut s).unwrap();
        let e = p.exit.unwrap();
        let n = p.times.len();
        assert!(e.tau > p.times[n - 2] && e.tau <= p.times[n - 1]);
        let last = p.states[n - 1];
        assert!(last >= 1.0 || last <= -1.0);
        assert!(p.states[..n - 1].iter().all(|x| x.abs() < 1.0));
        // overshoot is bounded by a few noise standard deviations per step
        assert!(last.abs() - 1.0 <= 0.5 * 0.1 * 6.0 + 0.02);
    }

    #[test]
    fn replayed_noise_reproduces_a_path() {
        let m = model("cubic");
        let cfg = SimConfig::new(1e-3, 0.2, Scheme::Milstein, 3.0).unwrap();
        let mut s = PathStream::new(StreamKey::path(5, 1));
        let p = simulate_path(&m, 0.0, &cfg, &mut s).unwrap();
        let q = simulate_path(&m, 0.0, &cfg, &mut Replay::new(&p.dw)).unwrap();
        assert_eq!(p.states, q.states);
    }

    #[test]
    fn replay_exhaustion_is_an_error() {
        let m = model("linear-ou");
        let cfg = SimConfig::new(1e-3, 0.01, Scheme::Euler, 1.0).unwrap();
        let dw = vec![0.0; 10];
        assert!(matches!(
            simulate_path(&m, 0.0, &cfg, &mut Replay::new(&dw)),
            Err(SimError::NoiseExhausted(_))
        ));
    }

    #[test]
    fn watching_records_neighborhood_exit_first() {
        let m = model("linear-ou");
        let nb = Neighborhood {
            r: 0.5,
            v_minus: -0.5,
            v_plus: 0.5,
        };
        let cfg = SimConfig::euler(1e-3, 0.1, 1.0).unwrap();
        let mut s = PathStream::new(StreamKey::path(2, 2));
        let p = simulate_path_watching(&m, &nb, 0.0, &cfg, &mut s).unwrap();
        let e = p.exit.unwrap();
        let (tv, sv) = e.crossed_neighborhood.unwrap();
        assert!(tv < e.tau);
        assert_eq!(sv, e.side);
    }
}
