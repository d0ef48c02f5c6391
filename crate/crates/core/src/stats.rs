//! Interval estimates for Monte-Carlo results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sided standard normal quantile for 95% intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes >= trials { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Normal-approximation interval for the mean of `values`.
pub fn mean_interval(values: &[f64], z: f64) -> (f64, f64) {
    let n = values.len();
    let mu = mean(values);
    if n < 2 {
        return (mu, mu);
    }
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half = z * (var / n as f64).sqrt();
    (mu - half, mu + half)
}

/// One-sided lower confidence bound on `mean(a) / mean(b)` from a paired
/// bootstrap: the same resampled indices are applied to both samples.
pub fn paired_bootstrap_ratio_lower(a: &[f64], b: &[f64], resamples: usize, confidence: f64, seed: u64) -> f64 {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    assert!(!a.is_empty() && resamples > 0);
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios: Vec<f64> = (0..resamples)
        .map(|_| {
            let (mut sa, mut sb) = (0.0, 0.0);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                sa += a[i];
                sb += b[i];
            }
            sa / sb
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let k = (((1.0 - confidence) * resamples as f64).floor() as usize).min(resamples - 1);
    ratios[k]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_known_values() {
        // 10 of 100 at 95%
        let (lo, hi) = wilson_interval(10, 100, Z95);
        assert!((lo - 0.05522).abs() < 1e-4 && (hi - 0.17437).abs() < 1e-4);
        let (lo, hi) = wilson_interval(0, 50, Z95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.1);
    }

    #[test]
    fn bootstrap_bound_sits_below_ratio() {
        let a: Vec<f64> = (0..200).map(|i| 1.2 + 0.1 * ((i * 7 % 13) as f64 - 6.0) / 6.0).collect();
        let b: Vec<f64> = (0..200).map(|i| 1.0 + 0.1 * ((i * 5 % 11) as f64 - 5.0) / 5.0).collect();
        let ratio = mean(&a) / mean(&b);
        let lo = paired_bootstrap_ratio_lower(&a, &b, 500, 0.95, 1);
        assert!(lo < ratio && lo > ratio - 0.05);
    }
}
