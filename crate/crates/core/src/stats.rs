//! Estimators for correlated Monte Carlo series.

use statrs::distribution::{Beta, ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Mean with an autocorrelation-corrected standard error.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    /// Integrated autocorrelation time in samples (1 for white noise).
    pub tau_int: f64,
    pub n: usize,
}

impl Estimate {
    /// Number of standard errors separating the estimate from `value`.
    pub fn z_score(&self, value: f64) -> f64 {
        let d = self.mean - value;
        if self.stderr > 0.0 {
            d.abs() / self.stderr
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, value: f64, sigmas: f64) -> bool {
        self.z_score(value) <= sigmas
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Normalized autocorrelation at lags `0..=max_lag`.
pub fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        let mut r = vec![0.0; max_lag.min(n.saturating_sub(1)) + 1];
        r[0] = 1.0;
        return r;
    }
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            let ck: f64 = (0..n - k).map(|i| (xs[i] - m) * (xs[i + k] - m)).sum::<f64>() / n as f64;
            ck / c0
        })
        .collect()
}

/// Integrated autocorrelation time with Sokal's self-consistent window
/// (`W ≥ 5 τ`).
pub fn integrated_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let m = mean(xs);
    let d: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let c0: f64 = d.iter().map(|x| x * x).sum();
    if c0 == 0.0 {
        return 1.0;
    }
    let max_lag = (n / 2).min(5000);
    let mut tau = 1.0;
    for w in 1..=max_lag {
        let ck: f64 = d[..n - w].iter().zip(&d[w..]).map(|(a, b)| a * b).sum();
        tau += 2.0 * ck / c0;
        if w as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

pub fn estimate(xs: &[f64]) -> Result<Estimate> {
    if xs.is_empty() {
        return Err(Error::EmptySamples);
    }
    let tau_int = integrated_autocorrelation(xs);
    let n = xs.len();
    Ok(Estimate {
        mean: mean(xs),
        stderr: (variance(xs) * tau_int / n as f64).sqrt(),
        tau_int,
        n,
    })
}

/// Pools independent chains: per-chain autocorrelation, combined mean
/// weighted by chain length.
pub fn pooled_estimate(chains: &[Vec<f64>]) -> Result<Estimate> {
    let total: usize = chains.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptySamples);
    }
    let mut sum = 0.0;
    let mut var = 0.0;
    let mut tau_w = 0.0;
    for c in chains.iter().filter(|c| !c.is_empty()) {
        let e = estimate(c)?;
        let w = c.len() as f64 / total as f64;
        sum += w * e.mean;
        var += w * w * e.stderr * e.stderr;
        tau_w += w * e.tau_int;
    }
    Ok(Estimate {
        mean: sum,
        stderr: var.sqrt(),
        tau_int: tau_w,
        n: total,
    })
}

/// Ljung–Box portmanteau test for whiteness over lags `1..=lags`;
/// returns `(Q, p-value)`.
pub fn ljung_box(xs: &[f64], lags: usize) -> (f64, f64) {
    let n = xs.len() as f64;
    let rho = autocorrelation(xs, lags);
    let q: f64 = n * (n + 2.0)
        * rho
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, r)| r * r / (n - k as f64))
            .sum::<f64>();
    let dof = (rho.len() - 1).max(1) as f64;
    let p = ChiSquared::new(dof).map(|c| 1.0 - c.cdf(q)).unwrap_or(f64::NAN);
    (q, p)
}

/// Exact (Clopper–Pearson) binomial confidence interval for `k` successes
/// in `n` trials at the given two-sided confidence level.
pub fn clopper_pearson(k: u64, n: u64, confidence: f64) -> (f64, f64) {
    let alpha = 1.0 - confidence;
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(k as f64, (n - k + 1) as f64)
            .map(|b| b.inverse_cdf(alpha / 2.0))
            .unwrap_or(0.0)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new((k + 1) as f64, (n - k) as f64)
            .map(|b| b.inverse_cdf(1.0 - alpha / 2.0))
            .unwrap_or(1.0)
    };
    (lo, hi)
}

/// Two-sided confidence level of a `sigmas`-standard-deviation normal band.
pub fn sigma_confidence(sigmas: f64) -> f64 {
    use statrs::function::erf::erf;
    erf(sigmas / std::f64::consts::SQRT_2)
}
