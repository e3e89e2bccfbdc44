//! Empirical law of `M(T')` and its Gaussian limit `N(x, sigma0^2/(2 lambda))`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::Side;
use crate::num::{lit, to_f64, Real};
use crate::rng::{PathStream, StreamKey};
use crate::sde::{linearized_endpoint, LinearizedModel, SimConfig, SimError};
use crate::theory::{deterministic_time, gaussian_density};

pub const KDE_POINTS: usize = 512;
pub const KDE_SPAN_SD: f64 = 6.0;
pub const MIN_KDE_SAMPLE: usize = 1000;
/// Kernel contributions beyond this many bandwidths are dropped (`< 1e-17` relative).
const KERNEL_CUTOFF: f64 = 9.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DensityError {
    #[error("horizon exponent {exponent} outside the admissible window [{low}, {high}]")]
    Policy { exponent: f64, low: f64, high: f64 },
    #[error("sample has zero variance")]
    Degenerate,
    #[error("sample of size {0} is too small (at least {MIN_KDE_SAMPLE} needed)")]
    TooSmall(usize),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// `lambda T' = exponent * log(1/eps)`, admissible when the exponent lies in
/// `[1 - c/log(1/eps), 2 - kappa]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TPrimePolicy {
    pub exponent: f64,
    pub c: f64,
    pub kappa: f64,
}

impl Default for TPrimePolicy {
    fn default() -> Self {
        Self {
            exponent: 1.5,
            c: 1.0,
            kappa: 0.5,
        }
    }
}

impl TPrimePolicy {
    pub fn with_exponent(exponent: f64) -> Self {
        Self {
            exponent,
            ..Self::default()
        }
    }

    pub fn window(&self, eps: f64) -> (f64, f64) {
        (1.0 - self.c / (1.0 / eps).ln(), 2.0 - self.kappa)
    }

    pub fn t_prime(&self, eps: f64, lambda: f64) -> Result<f64, DensityError> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(DensityError::Parameter(format!("eps must lie in (0, 1), got {eps}")));
        }
        let (low, high) = self.window(eps);
        if !(self.exponent >= low && self.exponent <= high) {
            return Err(DensityError::Policy {
                exponent: self.exponent,
                low,
                high,
            });
        }
        Ok(self.exponent * (1.0 / eps).ln() / lambda)
    }
}

/// `n` draws of `M(T')` from `Y(0) = eps x`; draw `j` uses stream `(seed, 0, j)`.
pub fn sample_m_at<T: Real>(
    lin: &LinearizedModel<T>,
    x: T,
    policy: &TPrimePolicy,
    n: usize,
    cfg: &SimConfig<T>,
    seed: u64,
) -> Result<Vec<f64>, DensityError> {
    let eps = cfg.epsilon;
    let t_prime = policy.t_prime(to_f64(eps), to_f64(lin.lambda))?;
    sample_m_until(lin, x, lit(t_prime), n, cfg, seed)
}

fn sample_m_until<T: Real>(
    lin: &LinearizedModel<T>,
    x: T,
    t_end: T,
    n: usize,
    cfg: &SimConfig<T>,
    seed: u64,
) -> Result<Vec<f64>, DensityError> {
    let eps = cfg.epsilon;
    Ok((0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = PathStream::new(StreamKey::path(seed, j as u64));
            linearized_endpoint(lin, x, eps, t_end, cfg, &mut rng).map(|e| to_f64(e.m))
        })
        .collect::<Result<Vec<_>, SimError>>()?)
}

pub fn mean_and_sd(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Gaussian-kernel density on `KDE_POINTS` points over `mean +- 6 sd`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub n: usize,
    pub x_start: f64,
}

impl DensityEstimate {
    /// Trapezoid integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(z, v)| 0.5 * (v[0] + v[1]) * (z[1] - z[0]))
            .sum()
    }
}

/// Normal-reference bandwidth `1.06 sd n^{-1/5}` unless `bandwidth` is given.
pub fn kde(sample: &[f64], bandwidth: Option<f64>, x_start: f64) -> Result<DensityEstimate, DensityError> {
    let n = sample.len();
    if n < MIN_KDE_SAMPLE {
        return Err(DensityError::TooSmall(n));
    }
    let (mean, sd) = mean_and_sd(sample);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(DensityError::Degenerate);
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(DensityError::Parameter(format!("bandwidth must be positive, got {h}"))),
        None => 1.06 * sd * (n as f64).powf(-0.2),
    };
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = mean - KDE_SPAN_SD * sd;
    let step = 2.0 * KDE_SPAN_SD * sd / (KDE_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_POINTS).map(|i| lo + step * i as f64).collect();
    let norm = 1.0 / (n as f64 * h * std::f64::consts::TAU.sqrt());
    let values = grid
        .par_iter()
        .map(|&z| {
            let a = sorted.partition_point(|&v| v < z - KERNEL_CUTOFF * h);
            let b = sorted.partition_point(|&v| v <= z + KERNEL_CUTOFF * h);
            sorted[a..b]
                .iter()
                // fold from +0.0: an empty window must not print as -0
                .fold(0.0, |acc, &v| {
                    let u = (z - v) / h;
                    acc + (-0.5 * u * u).exp()
                })
                * norm
        })
        .collect();
    Ok(DensityEstimate {
        grid,
        values,
        bandwidth: h,
        n,
        x_start,
    })
}

/// The limiting law `N(x, sigma0^2 / (2 lambda))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianReference {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianReference {
    pub fn new(x: f64, sigma0: f64, lambda: f64) -> Result<Self, DensityError> {
        let variance = sigma0 * sigma0 / (2.0 * lambda);
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(DensityError::Parameter(format!("variance must be positive, got {variance}")));
        }
        Ok(Self { mean: x, variance })
    }

    pub fn density(&self, z: f64) -> f64 {
        gaussian_density(z, self.mean, self.variance)
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// `max_z |p_est(z) - p_ref(z)| e^{|x - z|}` over the estimate's grid.
pub fn weighted_sup_distance(est: &DensityEstimate, reference: &GaussianReference) -> f64 {
    weighted_gaps(est, reference).into_iter().fold(0.0, f64::max)
}

/// Pointwise `|p_est(z) - p_ref(z)| e^{|x - z|}`.
pub fn weighted_gaps(est: &DensityEstimate, reference: &GaussianReference) -> Vec<f64> {
    est.grid
        .iter()
        .zip(&est.values)
        .map(|(&z, &p)| (p - reference.density(z)).abs() * (reference.mean - z).abs().exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallBall {
    pub sign: Side,
    /// `a(eps) = c eps^theta`.
    pub a: f64,
    /// Deterministic horizon `T_eps` at which `M` is observed.
    pub t_eps: f64,
    pub n: usize,
    pub hits_plus: usize,
    pub hits_minus: usize,
    /// Frequency of `0 < sign * M(T_eps) <= a`.
    pub empirical: f64,
    pub se: f64,
    /// `p^x(0) a`.
    pub theoretical: f64,
    pub ratio: f64,
    pub warnings: Vec<String>,
}

/// Frequency of `0 < +-M(T_eps) <= a` against `p^x(0) a`.
#[allow(clippy::too_many_arguments)]
pub fn small_ball_check<T: Real>(
    lin: &LinearizedModel<T>,
    x: T,
    theta: f64,
    scale: f64,
    sign: Side,
    n: usize,
    cfg: &SimConfig<T>,
    seed: u64,
) -> Result<SmallBall, DensityError> {
    if !(theta > 0.0) || !(scale > 0.0) || n == 0 {
        return Err(DensityError::Parameter("theta > 0, c > 0 and n > 0 required".into()));
    }
    let eps = to_f64(cfg.epsilon);
    let lambda = to_f64(lin.lambda);
    let a = scale * eps.powf(theta);
    let t_eps = deterministic_time(eps, to_f64(lin.r()), a, lambda);
    let sample = sample_m_until(lin, x, lit(t_eps), n, cfg, seed)?;
    let hits_plus = sample.iter().filter(|&&m| m > 0.0 && m <= a).count();
    let hits_minus = sample.iter().filter(|&&m| m < 0.0 && m >= -a).count();
    let hits = match sign {
        Side::Plus => hits_plus,
        Side::Minus => hits_minus,
    };
    let empirical = hits as f64 / n as f64;
    let reference = GaussianReference::new(to_f64(x), to_f64(lin.sigma0), lambda)?;
    let theoretical = reference.density(0.0) * a;
    let mut warnings = Vec::new();
    if hits < 25 {
        warnings.push(format!("only {hits} hits; increase n"));
    }
    Ok(SmallBall {
        sign,
        a,
        t_eps,
        n,
        hits_plus,
        hits_minus,
        empirical,
        se: (empirical * (1.0 - empirical) / n as f64).sqrt(),
        theoretical,
        ratio: empirical / theoretical,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_window() {
        let p = TPrimePolicy::default();
        assert!((p.t_prime(0.1, 1.0).unwrap() - 1.5 * 10f64.ln()).abs() < 1e-12);
        assert!(TPrimePolicy::with_exponent(2.5).t_prime(0.1, 1.0).is_err());
        assert!(TPrimePolicy::with_exponent(0.1).t_prime(0.1, 1.0).is_err());
        assert!(TPrimePolicy::with_exponent(1.5).t_prime(0.1, 2.0).is_ok());
    }

    #[test]
    fn kde_rejects_degenerate_and_small_samples() {
        assert_eq!(kde(&[1.0; 2000], None, 0.0), Err(DensityError::Degenerate));
        assert_eq!(kde(&[1.0, 2.0], None, 0.0), Err(DensityError::TooSmall(2)));
    }

    #[test]
    fn reference_density_at_mean() {
        let r = GaussianReference::new(0.0, 1.0, 1.0).unwrap();
        assert!((r.density(0.0) - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
    }
}
