//! Estimators for `P(tau_I > (alpha/lambda) log(1/eps))` and for the exit side of
//! the paths realizing that event.
//!
//! Stream keys: direct path `j` uses `(seed, 0, j)`; splitting level `k`, slot `j`
//! uses `(seed, k, j)` and the resampling draw of level `k` uses `(seed, k, u64::MAX)`.
//! A survivor's exit side is classified by continuing the stream that carried it
//! through the last level, so one level of splitting reproduces the direct estimator.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::flow::Conjugation;
use crate::model::{ModelSpec, Side};
use crate::num::{lit, to_f64, Real};
use crate::rng::{PathStream, StreamKey};
use crate::sde::{advance, exit_from, exit_summary, linearized_exit, Advance, LinearizedModel, SimConfig, SimError};
use crate::theory::{exit_split, TheoremConstants};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// `theta_cap` of the start-point policy `|x| <= sqrt(2 theta_cap log(1/eps) / lambda)`.
pub const THETA_CAP: f64 = 2.0;

/// Minimum number of surviving paths for a conditional split.
pub const MIN_CONDITIONAL: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RareError {
    #[error("invalid query: {0}")]
    Query(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("only {found} surviving paths exited; at least {needed} are needed")]
    InsufficientSample { found: usize, needed: usize },
}

/// The event `{tau_I > t*}` with `t* = (alpha/lambda) log(1/eps)`, started at `X(0) = eps x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailQuery {
    pub alpha: f64,
    pub epsilon: f64,
    pub x_start: f64,
}

impl TailQuery {
    pub fn new(alpha: f64, epsilon: f64, x_start: f64) -> Result<Self, RareError> {
        if !(alpha > 1.0) || !alpha.is_finite() {
            return Err(RareError::Query(format!("alpha must exceed 1, got {alpha}")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(RareError::Query(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        if !x_start.is_finite() {
            return Err(RareError::Query(format!("start {x_start} is not finite")));
        }
        Ok(Self {
            alpha,
            epsilon,
            x_start,
        })
    }

    pub fn horizon(&self, lambda: f64) -> f64 {
        self.alpha / lambda * (1.0 / self.epsilon).ln()
    }

    /// Largest `|x|` covered by the start-point policy.
    pub fn k_bound(&self, lambda: f64) -> f64 {
        (2.0 * THETA_CAP * (1.0 / self.epsilon).ln() / lambda).sqrt()
    }

    pub fn x0(&self) -> f64 {
        self.epsilon * self.x_start
    }

    /// Warnings for queries outside the theorem's hypotheses.
    pub fn warnings<T: Real>(&self, model: &ModelSpec<T>) -> Vec<String> {
        let lambda = to_f64(model.lambda);
        let mut out = Vec::new();
        if self.x_start.abs() > self.k_bound(lambda) {
            out.push(format!(
                "|x| = {} exceeds K(eps) = {:.4}; the asymptotics are not claimed there",
                self.x_start.abs(),
                self.k_bound(lambda)
            ));
        }
        out
    }

    fn check_start<T: Real>(&self, model: &ModelSpec<T>) -> Result<T, RareError> {
        let x0 = lit::<T>(self.x0());
        if !(x0 > model.q_minus && x0 < model.q_plus) {
            return Err(RareError::Query(format!("start eps*x = {} is not inside the interval", self.x0())));
        }
        Ok(x0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Direct,
    Splitting,
}

/// Exit sides of the paths that survived past the horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PerSide {
    pub minus: usize,
    pub plus: usize,
}

impl PerSide {
    fn record(&mut self, side: Side) {
        match side {
            Side::Minus => self.minus += 1,
            Side::Plus => self.plus += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.minus + self.plus
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: Method,
    pub n_effective: usize,
    /// Splitting thresholds `t_1 < ... < t_L = t*`.
    pub levels: Option<Vec<f64>>,
    /// Conditional survival fraction per level.
    pub level_fractions: Option<Vec<f64>>,
    pub per_side: PerSide,
    /// Paths that were still inside when the continuation hit `max_time`.
    pub censored: usize,
    pub horizon: f64,
    pub warnings: Vec<String>,
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // center - half cancels to O(1e-18) rather than 0 at k = 0 (and likewise at k = n).
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k as f64 == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

fn censoring_warning(censored: usize, horizon: f64, max_time: f64) -> Option<String> {
    if max_time < horizon {
        Some(format!(
            "horizon {horizon:.4} exceeds max_time {max_time:.4}; all survivors are censored"
        ))
    } else if censored > 0 {
        Some(format!(
            "{censored} surviving paths had not exited by max_time {max_time:.4}; counted as survivors"
        ))
    } else {
        None
    }
}

/// A Markov process restarted from stored states at fixed times.
pub trait RestartableProcess: Sync {
    type State: Clone + Send + Sync;
    type Outcome: Send;
    type Error: Send;

    fn start(&self) -> Self::State;

    /// Runs from `from` to `to`; `None` when the path is killed.
    fn evolve(
        &self,
        state: &Self::State,
        from: f64,
        to: f64,
        rng: &mut PathStream,
    ) -> Result<Option<Self::State>, Self::Error>;

    /// Classifies a path that survived to `at`, continuing the same stream.
    fn finish(&self, state: &Self::State, at: f64, rng: &mut PathStream) -> Result<Self::Outcome, Self::Error>;
}

/// Result of fixed-effort splitting.
#[derive(Debug, Clone)]
pub struct SplittingRun<O> {
    pub fractions: Vec<f64>,
    pub survivors: Vec<usize>,
    /// Outcomes of the final-level survivors, in slot order.
    pub outcomes: Vec<O>,
    /// First level with no survivors.
    pub extinct_at: Option<usize>,
}

impl<O> SplittingRun<O> {
    pub fn estimate(&self) -> f64 {
        self.fractions.iter().product()
    }
}

/// `floor(n/S)` copies of every survivor plus `n mod S` further distinct survivors
/// chosen uniformly, so each survivor has `n/S` expected copies.
fn resample<S: Clone>(survivors: &[S], n: usize, rng: &mut PathStream) -> Vec<S> {
    let s = survivors.len();
    let mut out = Vec::with_capacity(n);
    for st in survivors {
        for _ in 0..n / s {
            out.push(st.clone());
        }
    }
    let mut idx: Vec<usize> = (0..s).collect();
    for i in 0..n % s {
        let j = i + rng.index(s - i);
        idx.swap(i, j);
    }
    let mut extra: Vec<usize> = idx[..n % s].to_vec();
    extra.sort_unstable();
    out.extend(extra.into_iter().map(|i| survivors[i].clone()));
    out
}

/// Fixed-effort splitting over the thresholds `0 < t_1 < ... < t_L` with `n` slots per level.
pub fn split_fixed_effort<P: RestartableProcess>(
    process: &P,
    thresholds: &[f64],
    n: usize,
    seed: u64,
) -> Result<SplittingRun<P::Outcome>, P::Error> {
    let mut population = vec![process.start(); n];
    let mut fractions = Vec::with_capacity(thresholds.len());
    let mut survivors_per_level = Vec::with_capacity(thresholds.len());
    let mut from = 0.0;
    let last = thresholds.len() - 1;
    for (k, &to) in thresholds.iter().enumerate() {
        let results = population
            .par_iter()
            .enumerate()
            .map(|(j, st)| {
                let mut rng = PathStream::new(StreamKey::new(seed, k as u64, j as u64));
                let next = process.evolve(st, from, to, &mut rng)?;
                match next {
                    Some(s) if k == last => {
                        let outcome = process.finish(&s, to, &mut rng)?;
                        Ok(Some((s, Some(outcome))))
                    }
                    Some(s) => Ok(Some((s, None))),
                    None => Ok(None),
                }
            })
            .collect::<Result<Vec<_>, P::Error>>()?;
        let alive: Vec<(P::State, Option<P::Outcome>)> = results.into_iter().flatten().collect();
        fractions.push(alive.len() as f64 / n as f64);
        survivors_per_level.push(alive.len());
        if alive.is_empty() {
            return Ok(SplittingRun {
                fractions,
                survivors: survivors_per_level,
                outcomes: Vec::new(),
                extinct_at: Some(k),
            });
        }
        if k == last {
            return Ok(SplittingRun {
                fractions,
                survivors: survivors_per_level,
                outcomes: alive.into_iter().filter_map(|(_, o)| o).collect(),
                extinct_at: None,
            });
        }
        let states: Vec<P::State> = alive.into_iter().map(|(s, _)| s).collect();
        let mut rng = PathStream::new(StreamKey::new(seed, k as u64, u64::MAX));
        population = resample(&states, n, &mut rng);
        from = to;
    }
    unreachable!("thresholds are non-empty")
}

/// The SDE killed at the boundary; survivors are classified by their exit side.
struct Survival<'a, T> {
    model: &'a ModelSpec<T>,
    cfg: &'a SimConfig<T>,
    x0: T,
}

impl<T: Real> RestartableProcess for Survival<'_, T> {
    type State = T;
    type Outcome = Option<Side>;
    type Error = SimError;

    fn start(&self) -> T {
        self.x0
    }

    fn evolve(&self, x: &T, from: f64, to: f64, rng: &mut PathStream) -> Result<Option<T>, SimError> {
        Ok(match advance(self.model, *x, lit(from), lit(to), self.cfg, rng)? {
            Advance::Survived(x) => Some(x),
            Advance::Exited { .. } => None,
        })
    }

    fn finish(&self, x: &T, at: f64, rng: &mut PathStream) -> Result<Option<Side>, SimError> {
        Ok(exit_from(self.model, *x, lit(at), self.cfg, rng)?.map(|(_, s)| s))
    }
}

fn tally(outcomes: &[Option<Side>]) -> (PerSide, usize) {
    let mut per_side = PerSide::default();
    let mut censored = 0;
    for o in outcomes {
        match o {
            Some(s) => per_side.record(*s),
            None => censored += 1,
        }
    }
    (per_side, censored)
}

/// Plain Monte Carlo over `n` paths with a Wilson interval.
pub fn tail_direct<T: Real>(
    model: &ModelSpec<T>,
    query: &TailQuery,
    n: usize,
    cfg: &SimConfig<T>,
    seed: u64,
) -> Result<TailEstimate, RareError> {
    if n == 0 {
        return Err(RareError::Query("n must be positive".into()));
    }
    let x0 = query.check_start(model)?;
    let horizon = query.horizon(to_f64(model.lambda));
    let process = Survival { model, cfg, x0 };
    let outcomes = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = PathStream::new(StreamKey::path(seed, j as u64));
            match process.evolve(&x0, 0.0, horizon, &mut rng)? {
                Some(x) => Ok(Some(process.finish(&x, horizon, &mut rng)?)),
                None => Ok(None),
            }
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let survived: Vec<Option<Side>> = outcomes.into_iter().flatten().collect();
    let k = survived.len();
    let (per_side, censored) = tally(&survived);
    let (ci_low, ci_high) = wilson_interval(k, n, Z95);
    let mut warnings = query.warnings(model);
    if k < 25 {
        warnings.push(format!("only {k} survivors; increase n or use splitting"));
    }
    warnings.extend(censoring_warning(censored, horizon, to_f64(cfg.max_time)));
    Ok(TailEstimate {
        p_hat: k as f64 / n as f64,
        ci_low,
        ci_high,
        method: Method::Direct,
        n_effective: n,
        levels: None,
        level_fractions: None,
        per_side,
        censored,
        horizon,
        warnings,
    })
}

/// Delta-method interval for a product of level fractions estimated from `n` slots each,
/// treating levels as independent.
pub fn product_interval(fractions: &[f64], n: usize, z: f64) -> (f64, f64) {
    let p: f64 = fractions.iter().product();
    let var_log: f64 = fractions.iter().map(|&q| (1.0 - q) / (n as f64 * q)).sum();
    let se = var_log.sqrt();
    ((p * (-z * se).exp()).min(p), (p * (z * se).exp()).clamp(p, 1.0))
}

/// Fixed-effort splitting on survival time with thresholds `t_k = k t*/levels`.
pub fn tail_splitting<T: Real>(
    model: &ModelSpec<T>,
    query: &TailQuery,
    levels: usize,
    paths_per_level: usize,
    cfg: &SimConfig<T>,
    seed: u64,
) -> Result<TailEstimate, RareError> {
    if levels == 0 || paths_per_level == 0 {
        return Err(RareError::Query("levels and paths_per_level must be positive".into()));
    }
    let x0 = query.check_start(model)?;
    let horizon = query.horizon(to_f64(model.lambda));
    let thresholds: Vec<f64> = (1..=levels)
        .map(|k| if k == levels { horizon } else { horizon * k as f64 / levels as f64 })
        .collect();
    let process = Survival { model, cfg, x0 };
    let run = split_fixed_effort(&process, &thresholds, paths_per_level, seed)?;
    let mut warnings = query.warnings(model);
    let (p_hat, ci_low, ci_high) = match run.extinct_at {
        Some(k) => {
            warnings.push(format!(
                "no survivors at level {}; increase paths_per_level",
                k + 1
            ));
            let before: f64 = run.fractions[..k].iter().product();
            (0.0, 0.0, (3.0 / paths_per_level as f64 * before).min(1.0))
        }
        None => {
            let (lo, hi) = product_interval(&run.fractions, paths_per_level, Z95);
            (run.estimate(), lo, hi)
        }
    };
    let (per_side, censored) = tally(&run.outcomes);
    warnings.extend(censoring_warning(censored, horizon, to_f64(cfg.max_time)));
    Ok(TailEstimate {
        p_hat,
        ci_low,
        ci_high,
        method: Method::Splitting,
        n_effective: levels * paths_per_level,
        levels: Some(thresholds),
        level_fractions: Some(run.fractions),
        per_side,
        censored,
        horizon,
        warnings,
    })
}

/// Exit-side frequencies among the paths that survived past the horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalSplit {
    pub p_minus: f64,
    pub p_plus: f64,
    /// Wilson interval for `p_plus`.
    pub ci_plus: (f64, f64),
    pub n: usize,
    /// `(p_minus, p_plus)` from `|f(q-/+)|`.
    pub theoretical: (f64, f64),
}

/// Conditional exit split from the survivors of an estimate.
pub fn conditional_exit_distribution<T: Real>(
    constants: &TheoremConstants<T>,
    estimate: &TailEstimate,
) -> Result<ConditionalSplit, RareError> {
    let n = estimate.per_side.total();
    if n < MIN_CONDITIONAL {
        return Err(RareError::InsufficientSample {
            found: n,
            needed: MIN_CONDITIONAL,
        });
    }
    let (tm, tp) = exit_split(constants);
    let p_plus = estimate.per_side.plus as f64 / n as f64;
    Ok(ConditionalSplit {
        p_minus: 1.0 - p_plus,
        p_plus,
        ci_plus: wilson_interval(estimate.per_side.plus, n, Z95),
        n,
        theoretical: (to_f64(tm), to_f64(tp)),
    })
}

/// Unconditional exit-side frequency.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitSplitEstimate {
    pub p_plus: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub n: usize,
    pub censored: usize,
}

/// Plain Monte Carlo frequency of exit at `q+` from `x0`; censored paths count as failures.
pub fn unconditional_exit_split<T: Real>(
    model: &ModelSpec<T>,
    x0: T,
    n: usize,
    cfg: &SimConfig<T>,
    seed: u64,
) -> Result<ExitSplitEstimate, RareError> {
    if n == 0 {
        return Err(RareError::Query("n must be positive".into()));
    }
    let sample = exit_summary(model, x0, cfg, n, seed)?;
    let k = sample.count(Side::Plus);
    let p = k as f64 / n as f64;
    Ok(ExitSplitEstimate {
        p_plus: p,
        se: (p * (1.0 - p) / n as f64).sqrt(),
        ci: wilson_interval(k, n, Z95),
        n,
        censored: sample.censored(),
    })
}

/// Summary of `theta = tau_I - (1/lambda) log(1/eps) - C_side + (1/lambda) log|M(tau_V)|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub max_abs: f64,
}

impl ResidualSummary {
    pub fn from_values(mut v: Vec<f64>) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let q = |p: f64| v[((n - 1) as f64 * p).round() as usize];
        Some(Self {
            n,
            mean,
            sd,
            q05: q(0.05),
            q50: q(0.5),
            q95: q(0.95),
            max_abs: v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        })
    }
}

/// Residuals of the exit-time representation: each path runs in linearized
/// coordinates until `|Y| = R`, then continues in the original coordinates from
/// `g(+-R)` to the exit of the interval. Path `j` uses stream `(seed, 0, j)`.
#[allow(clippy::too_many_arguments)]
pub fn exit_time_residuals<T: Real>(
    conj: &Conjugation<T>,
    lin: &LinearizedModel<T>,
    constants: &TheoremConstants<T>,
    x: T,
    n: usize,
    cfg: &SimConfig<T>,
    seed: u64,
) -> Result<Vec<f64>, RareError> {
    let model = conj.model();
    let eps = cfg.epsilon;
    let lambda = model.lambda;
    let nbhd = lin.nbhd;
    let values = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = PathStream::new(StreamKey::path(seed, j as u64));
            let Some(e) = linearized_exit(lin, x, eps, cfg, &mut rng)? else {
                return Ok(None);
            };
            let start = match e.side {
                Side::Plus => nbhd.v_plus,
                Side::Minus => nbhd.v_minus,
            };
            let Some((tau, side)) = exit_from(model, start, e.tau, cfg, &mut rng)? else {
                return Ok(None);
            };
            let r = tau - eps.recip().ln() / lambda - constants.c(side) + e.m.abs().ln() / lambda;
            Ok(Some(to_f64(r)))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(values.into_iter().flatten().collect())
}

/// Two-state chain killed at each step with a state-dependent probability; its
/// survival probabilities are known exactly by enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyChain {
    /// Per-step survival probability in each state.
    pub survive: [f64; 2],
    /// Probability of staying in the current state after surviving a step.
    pub stay: [f64; 2],
    pub start: u8,
}

impl ToyChain {
    fn step(&self, s: u8, rng: &mut PathStream) -> Option<u8> {
        let i = s as usize;
        if rng.uniform() >= self.survive[i] {
            return None;
        }
        Some(if rng.uniform() < self.stay[i] { s } else { 1 - s })
    }

    /// `P(alive after `steps` steps)`, summing over every state sequence.
    pub fn exact_survival(&self, steps: usize) -> f64 {
        assert!(steps <= 24, "enumeration is exponential in the number of steps");
        let mut total = 0.0;
        for word in 0u32..(1 << steps) {
            let mut s = self.start as usize;
            let mut p = 1.0;
            for k in 0..steps {
                let next = ((word >> k) & 1) as usize;
                let move_p = if next == s { self.stay[s] } else { 1.0 - self.stay[s] };
                p *= self.survive[s] * move_p;
                s = next;
            }
            total += p;
        }
        total
    }
}

impl RestartableProcess for ToyChain {
    type State = u8;
    type Outcome = u8;
    type Error = std::convert::Infallible;

    fn start(&self) -> u8 {
        self.start
    }

    fn evolve(&self, s: &u8, from: f64, to: f64, rng: &mut PathStream) -> Result<Option<u8>, Self::Error> {
        let mut s = *s;
        for _ in (from.round() as i64)..(to.round() as i64) {
            match self.step(s, rng) {
                Some(n) => s = n,
                None => return Ok(None),
            }
        }
        Ok(Some(s))
    }

    fn finish(&self, s: &u8, _at: f64, _rng: &mut PathStream) -> Result<u8, Self::Error> {
        Ok(*s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_is_ordered_and_clamped() {
        let (lo, hi) = wilson_interval(0, 100, Z95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
        let (lo, hi) = wilson_interval(50, 100, Z95);
        assert!(lo < 0.5 && hi > 0.5);
        assert!((0.5 - lo - (hi - 0.5)).abs() < 1e-12);
        assert_eq!(wilson_interval(100, 100, Z95).1, 1.0);
    }

    #[test]
    fn resampling_is_balanced() {
        let mut rng = PathStream::new(StreamKey::new(1, 1, u64::MAX));
        let out = resample(&[0u8, 1, 2], 10, &mut rng);
        assert_eq!(out.len(), 10);
        for s in 0..3u8 {
            let c = out.iter().filter(|&&v| v == s).count();
            assert!(c == 3 || c == 4);
        }
    }

    #[test]
    fn query_validation_and_policy() {
        assert!(TailQuery::new(1.0, 0.1, 0.0).is_err());
        assert!(TailQuery::new(1.3, 1.5, 0.0).is_err());
        let q = TailQuery::new(1.3, 0.1, 0.0).unwrap();
        assert!((q.horizon(1.0) - 1.3 * 10f64.ln()).abs() < 1e-12);
        assert!((q.k_bound(1.0) - (4.0 * 10f64.ln()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn toy_chain_enumeration_matches_recursion() {
        let chain = ToyChain {
            survive: [0.9, 0.6],
            stay: [0.7, 0.8],
            start: 0,
        };
        // forward recursion on the sub-stochastic matrix
        let mut w = [1.0, 0.0];
        for _ in 0..6 {
            let a = w[0] * 0.9 * 0.7 + w[1] * 0.6 * 0.2;
            let b = w[0] * 0.9 * 0.3 + w[1] * 0.6 * 0.8;
            w = [a, b];
        }
        assert!((chain.exact_survival(6) - (w[0] + w[1])).abs() < 1e-14);
    }
}
