//! Distribution helpers: quantiles, KS tests, sample moments.

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::keying::standard_normal_cdf;

/// Φ⁻¹(p), polished with Newton steps against the erfc-based Φ.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!("quantile level {p} outside (0, 1)")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let mut x = n.inverse_cdf(p);
    for _ in 0..3 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf < 1e-300 {
            break;
        }
        x -= (standard_normal_cdf(x) - p) / pdf;
    }
    Ok(x)
}

/// Inverse CDF of χ²_k.
pub fn chi2_quantile(k: usize, p: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("chi-square needs k >= 1"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!("quantile level {p} outside (0, 1)")));
    }
    if k == 2 {
        return Ok(-2.0 * (-p).ln_1p());
    }
    let d = ChiSquared::new(k as f64).expect("k >= 1");
    let mut x = d.inverse_cdf(p);
    for _ in 0..8 {
        let f = d.pdf(x);
        if !(f > 0.0) {
            break;
        }
        let step = (d.cdf(x) - p) / f;
        x = (x - step).max(x / 2.0);
        if step.abs() < 1e-14 * x.max(1.0) {
            break;
        }
    }
    Ok(x)
}

pub fn chi2_cdf(k: usize, x: f64) -> f64 {
    if k == 2 {
        return -(-x / 2.0).exp_m1();
    }
    ChiSquared::new(k as f64).expect("k >= 1").cdf(x)
}

/// One-sample Kolmogorov–Smirnov distance sup |F_n − F|.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of a KS distance with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let statistic = ks_statistic(samples, cdf);
    KsResult {
        statistic,
        p_value: ks_pvalue(statistic, samples.len()),
    }
}

/// Sample mean and unbiased standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation around the median (unscaled).
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    median(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_two_dof_is_exponential() {
        assert!((chi2_quantile(2, 0.95).unwrap() - 5.991464547107979).abs() < 1e-12);
        for alpha in [0.1, 0.05, 1e-3, 1e-6] {
            let q = chi2_quantile(2, 1.0 - alpha).unwrap();
            assert!((q + 2.0 * alpha.ln()).abs() < 1e-9);
        }
        assert!((5.991464547107979f64.sqrt() - 2.448).abs() < 1e-3);
    }

    /// Reference quantiles from 30-digit arbitrary-precision evaluation.
    #[test]
    fn chi2_general_k() {
        let cases = [
            (1, 0.95, 3.8414588206941245),
            (3, 0.5, 2.3659738843753383),
            (5, 0.99, 15.086272469388988),
            (10, 0.05, 3.9402991361190601),
        ];
        for (k, p, want) in cases {
            let got = chi2_quantile(k, p).unwrap();
            assert!((got - want).abs() < 1e-9, "k={k} p={p}: {got}");
            assert!((chi2_cdf(k, got) - p).abs() < 1e-12);
        }
        assert!(chi2_quantile(0, 0.5).is_err());
        assert!(chi2_quantile(2, 1.0).is_err());
    }

    #[test]
    fn normal_quantile_inverts_cdf() {
        for p in [1e-5, 1e-3, 0.025, 0.5, 0.9, 0.999] {
            let x = normal_quantile(p).unwrap();
            assert!((standard_normal_cdf(x) - p).abs() < 1e-14 * p.max(1e-3) * 1e3);
        }
        assert!((normal_quantile(0.975).unwrap() - 1.959963984540054).abs() < 1e-12);
    }

    #[test]
    fn ks_detects_mismatch() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let r = ks_test(&xs, |x| x.clamp(0.0, 1.0));
        assert!(r.statistic <= 0.0005 + 1e-12);
        assert!(r.p_value > 0.99);
        let r = ks_test(&xs, |x| (x * x).clamp(0.0, 1.0));
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn robust_stats() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
