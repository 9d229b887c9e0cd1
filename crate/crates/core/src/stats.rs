//! Small statistics used by the estimators and studies.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Sample mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var / n))
}

/// Least-squares line `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Fit of `log y` against `log x`.
pub fn fit_log_log(x: &[f64], y: &[f64]) -> Option<LineFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| libm::log(*v)).collect();
    let ly: Vec<f64> = y.iter().map(|v| libm::log(*v)).collect();
    fit_line(&lx, &ly)
}

/// Integrated autocorrelation time of `series` with Geyer's initial
/// positive sequence truncation. Returns `None` for a constant series.
pub fn integrated_autocorrelation(series: &[f64]) -> Option<f64> {
    let n = series.len();
    if n < 4 {
        return None;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0 = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return None;
    }
    let rho = |k: usize| -> f64 {
        let s: f64 = (0..n - k).map(|i| (series[i] - mean) * (series[i + k] - mean)).sum();
        s / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n / 2 {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    Some(tau.max(1.0 / n as f64))
}

/// Lag-`k` autocorrelation (pooled over the rows of `series`).
pub fn autocorrelation(series: &[&[f64]], k: usize) -> Option<f64> {
    let (mut num, mut den, mut count) = (0.0, 0.0, 0usize);
    let total: usize = series.iter().map(|s| s.len()).sum();
    if total == 0 {
        return None;
    }
    let mean = series.iter().flat_map(|s| s.iter()).sum::<f64>() / total as f64;
    for s in series {
        for i in 0..s.len() {
            den += (s[i] - mean) * (s[i] - mean);
            if i + k < s.len() {
                num += (s[i] - mean) * (s[i + k] - mean);
                count += 1;
            }
        }
    }
    if !(den > 0.0) || count == 0 {
        return None;
    }
    Some(num / den * total as f64 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let f = fit_line(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-15 && (f.intercept - 1.0).abs() < 1e-15);
        assert!((f.r2 - 1.0).abs() < 1e-15);
        let p = fit_log_log(&[1.0, 10.0, 100.0], &[2.0, 20.0, 200.0]).unwrap();
        assert!((p.slope - 1.0).abs() < 1e-12);
        assert!(fit_log_log(&[1.0, 2.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn ar1_autocorrelation_time() {
        // AR(1) with φ = 0.5 has τ = (1 + φ)/(1 − φ) = 3
        use crate::sde::{domain, RngPlan, StreamLabel};
        let mut s = RngPlan::new(3).stream(StreamLabel::new(domain::SCRATCH, 0, 0, 0));
        let mut x = 0.0;
        let series: Vec<f64> = (0..200_000)
            .map(|_| {
                x = 0.5 * x + s.normal();
                x
            })
            .collect();
        let tau = integrated_autocorrelation(&series).unwrap();
        assert!((tau - 3.0).abs() < 0.15, "{tau}");
        let r1 = autocorrelation(&[&series], 1).unwrap();
        assert!((r1 - 0.5).abs() < 0.01);
    }
}
