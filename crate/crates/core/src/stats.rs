//! Goodness-of-fit helpers.

use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided Kolmogorov-Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic p-value of the statistic `d` for sample size `n` (Stephens' correction).
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lam = (sn + 0.12 + 0.11 / sn) * d;
    if lam < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lam * lam).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS test against `N(mean, sd^2)`; returns `(statistic, p_value)`.
pub fn ks_normal(sample: &[f64], mean: f64, sd: f64) -> (f64, f64) {
    let normal = Normal::new(mean, sd).expect("positive standard deviation");
    let d = ks_statistic(sample, |x| normal.cdf(x));
    (d, ks_pvalue(d, sample.len()))
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pvalue_limits() {
        assert_eq!(ks_pvalue(0.0, 100), 1.0);
        assert!(ks_pvalue(0.5, 100) < 1e-10);
        // critical value 1.358 / sqrt(n) at level 0.05
        let p = ks_pvalue(1.358 / 1000f64.sqrt(), 1000);
        assert!((p - 0.05).abs() < 0.005, "{p}");
    }

    #[test]
    fn slope_of_a_line() {
        assert!((ols_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
    }
}
