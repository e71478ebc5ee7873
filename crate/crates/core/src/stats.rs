//! Exact binomial intervals and percentile bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialSummary {
    pub successes: u64,
    pub trials: u64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Clopper–Pearson interval for `successes` out of `trials`.
pub fn exact_binomial_ci(successes: u64, trials: u64, level: f64) -> Result<BinomialSummary> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be at least 1".into()));
    }
    if successes > trials {
        return Err(Error::Invalid(format!(
            "{successes} successes out of {trials} trials"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let (x, n) = (successes as f64, trials as f64);
    let tail = (1.0 - level) / 2.0;
    let lower = if successes == 0 {
        0.0
    } else if successes == trials {
        tail.powf(1.0 / n)
    } else {
        // P(X >= x; p) = tail, increasing in p.
        solve_tail(tail, true, |p| 1.0 - binomial_cdf(successes - 1, trials, p))
    };
    let upper = if successes == trials {
        1.0
    } else if successes == 0 {
        1.0 - tail.powf(1.0 / n)
    } else {
        // P(X <= x; p) = tail, decreasing in p.
        solve_tail(tail, false, |p| binomial_cdf(successes, trials, p))
    };
    Ok(BinomialSummary {
        successes,
        trials,
        estimate: x / n,
        lower,
        upper,
        level,
    })
}

/// `P(X <= k)` for `X ~ Binomial(n, p)`, summed in log space.
fn binomial_cdf(k: u64, n: u64, p: f64) -> f64 {
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return if k >= n { 1.0 } else { 0.0 };
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut log_choose = 0.0f64;
    let mut total = 0.0;
    for i in 0..=k.min(n) {
        if i > 0 {
            log_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        total += (log_choose + i as f64 * lp + (n - i) as f64 * lq).exp();
    }
    total.min(1.0)
}

/// Bisection for the `p` at which a monotone tail probability hits `target`.
fn solve_tail(target: f64, increasing: bool, tail: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let below = tail(mid) < target;
        if below == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Percentile bootstrap interval of `statistic` over `outcomes`.
pub fn bootstrap_ci(
    outcomes: &[f64],
    statistic: impl Fn(&[f64]) -> f64,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if outcomes.is_empty() {
        return Err(Error::Empty("bootstrap outcomes"));
    }
    if resamples < 100 {
        return Err(Error::Invalid(format!(
            "need at least 100 resamples, got {resamples}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = outcomes.len();
    let mut sample = vec![0.0; n];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for s in sample.iter_mut() {
            *s = outcomes[rng.random_range(0..n)];
        }
        stats.push(statistic(&sample));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo_idx = ((tail * resamples as f64).floor() as usize).min(resamples - 1);
    let hi_idx = (((1.0 - tail) * resamples as f64).ceil() as usize)
        .saturating_sub(1)
        .min(resamples - 1);
    Ok((stats[lo_idx], stats[hi_idx]))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_success_closed_form() {
        let s = exact_binomial_ci(1000, 1000, 0.95).unwrap();
        assert!((s.lower - 0.025f64.powf(1e-3)).abs() < 1e-12);
        assert!((s.lower - 0.99632).abs() < 1e-5);
        assert_eq!(s.upper, 1.0);
    }

    #[test]
    fn zero_successes_lower_is_zero() {
        let s = exact_binomial_ci(0, 17, 0.95).unwrap();
        assert_eq!(s.lower, 0.0);
        assert!(s.upper > 0.0 && s.upper < 1.0);
    }

    #[test]
    fn interior_matches_tabulated_values() {
        // Standard tabulated Clopper-Pearson bounds.
        let s = exact_binomial_ci(5, 10, 0.95).unwrap();
        assert!(s.lower < 0.5 && 0.5 < s.upper);
        assert!((s.lower - 0.187_086).abs() < 1e-6, "{}", s.lower);
        assert!((s.upper - 0.812_914).abs() < 1e-6, "{}", s.upper);
        let s = exact_binomial_ci(1, 20, 0.95).unwrap();
        assert!((s.lower - 0.001_265).abs() < 1e-6, "{}", s.lower);
        assert!((s.upper - 0.248_733).abs() < 1e-6, "{}", s.upper);
    }

    #[test]
    fn invalid_counts() {
        assert!(exact_binomial_ci(3, 2, 0.95).is_err());
        assert!(exact_binomial_ci(0, 0, 0.95).is_err());
        assert!(exact_binomial_ci(1, 2, 1.0).is_err());
    }

    #[test]
    fn bootstrap_constant_is_degenerate() {
        let (lo, hi) = bootstrap_ci(&[1.0; 40], mean, 500, 0.95, 42).unwrap();
        assert_eq!((lo, hi), (1.0, 1.0));
        let (lo, hi) = bootstrap_ci(&[0.7; 40], mean, 500, 0.95, 42).unwrap();
        assert_eq!(lo, hi);
        assert!((lo - 0.7).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let v: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let a = bootstrap_ci(&v, mean, 1000, 0.95, 9).unwrap();
        let b = bootstrap_ci(&v, mean, 1000, 0.95, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_rejects_bad_input() {
        assert!(bootstrap_ci(&[], mean, 1000, 0.95, 1).is_err());
        assert!(bootstrap_ci(&[1.0], mean, 50, 0.95, 1).is_err());
    }

    #[test]
    fn pearson_edge_cases() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[2.0, 4.0, 6.0]), None);
    }
}
