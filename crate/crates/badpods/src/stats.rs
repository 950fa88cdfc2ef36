//! Bootstrap confidence intervals and small descriptive statistics.

use rand::{Rng, RngCore};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Default number of bootstrap resamples.
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;

/// Bias-corrected and accelerated (BCa) bootstrap confidence interval of the
/// mean.
pub fn bootstrap_bca_ci(
    samples: &[f64],
    level: f64,
    resamples: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("BCa interval needs at least 2 samples"));
    }
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::invalid("confidence level must lie in (0, 1)"));
    }
    if resamples < 2 {
        return Err(Error::invalid("need at least 2 bootstrap resamples"));
    }
    let mean: f64 = samples.iter().sum::<f64>() / n as f64;
    if samples.iter().all(|&s| s == samples[0]) {
        return Ok((mean, mean));
    }

    // Bootstrap distribution of the mean.
    let mut boot = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += samples[rng.gen_range(0..n)];
        }
        boot.push(acc / n as f64);
    }
    boot.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Bias correction from the fraction of bootstrap means below the
    // observed mean.
    let below = boot.iter().filter(|&&b| b < mean).count() as f64;
    let frac = (below / resamples as f64).clamp(1.0 / (resamples as f64 + 1.0), 1.0 - 1.0 / (resamples as f64 + 1.0));
    let z0 = normal.inverse_cdf(frac);

    // Acceleration from the jackknife skewness of the mean.
    let jack: Vec<f64> = (0..n)
        .map(|i| (mean * n as f64 - samples[i]) / (n as f64 - 1.0))
        .collect();
    let jmean: f64 = jack.iter().sum::<f64>() / n as f64;
    let d2: f64 = jack.iter().map(|j| (jmean - j).powi(2)).sum();
    let d3: f64 = jack.iter().map(|j| (jmean - j).powi(3)).sum();
    let accel = if d2 > 0.0 { d3 / (6.0 * d2.powf(1.5)) } else { 0.0 };

    let alpha = (1.0 - level) / 2.0;
    let adj = |z_alpha: f64| -> f64 {
        let num = z0 + z_alpha;
        normal.cdf(z0 + num / (1.0 - accel * num))
    };
    let a1 = adj(normal.inverse_cdf(alpha));
    let a2 = adj(normal.inverse_cdf(1.0 - alpha));

    let pick = |p: f64| -> f64 {
        let idx = ((p * resamples as f64).floor() as usize).min(resamples - 1);
        boot[idx]
    };
    Ok((pick(a1), pick(a2)))
}

/// Percentile of a sample with linear interpolation; `p` in [0, 1].
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("percentile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("percentile rank must lie in [0, 1]"));
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(s[lo] * (1.0 - frac) + s[hi] * frac)
}
