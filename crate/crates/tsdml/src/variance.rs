//! Long-run variance and confidence intervals for cross-fitted estimates.
//!
//! Scores from one evaluation fold are serially dependent, so each fold's
//! variance is a Bartlett-weighted long-run estimate over its own residual
//! series,
//!
//! ```text
//! V_i = (1/n_i) * [ sum_t v_t^2
//!       + 2 * sum_{s=1..m} (1 - s/(m+1)) * sum_{t >= s} v_t * v_{t-s} ]
//! ```
//!
//! with lag products taken strictly inside the fold. Fold variances combine
//! by evaluated share, and the interval at level `alpha` is
//! `theta ± z_{1-alpha/2} * sqrt(V / count)` over the total evaluated count.
//! The bandwidth is either fixed or chosen per fold by the plug-in rule
//! `m = 1.1447 * ((s1/s0)^2)^(1/3) * n^(1/3)` with a pilot window
//! `l = 4 (n/100)^(2/9)`.

use crate::crossfit::{DmlEstimate, EstimateDiagnostics};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VarianceError {
    #[error("fold has {len} residuals; the bandwidth {m} needs more than that")]
    FoldTooShort { len: usize, m: usize },
    #[error("automatic bandwidth needs at least 16 residuals, got {0}")]
    TooShortForAuto(usize),
    #[error("alpha must be strictly between 0 and 1, got {0}")]
    BadAlpha(f64),
    #[error("estimate has no folds")]
    NoFolds,
}

/// Bartlett kernel weight `1 - s/(m+1)` for lag `s` under bandwidth `m`.
///
/// Panics if `s` is outside `1..=m`: a lag beyond the bandwidth is a caller
/// bug, not a data condition.
pub fn bartlett_weight(s: usize, m: usize) -> f64 {
    assert!(s >= 1 && s <= m, "lag {s} outside 1..={m}");
    1.0 - s as f64 / (m as f64 + 1.0)
}

/// Bartlett long-run variance of one fold's residual series at bandwidth `m`.
/// Lag products stay inside the fold. `m = 0` is exactly the mean of squared
/// residuals.
pub fn newey_west_fold(residuals: &[f64], m: usize) -> Result<f64, VarianceError> {
    let n = residuals.len();
    if n <= m {
        return Err(VarianceError::FoldTooShort { len: n, m });
    }
    let mut total: f64 = residuals.iter().map(|v| v * v).sum();
    for s in 1..=m {
        let lag_sum: f64 = (s..n).map(|t| residuals[t] * residuals[t - s]).sum();
        total += 2.0 * bartlett_weight(s, m) * lag_sum;
    }
    Ok(total / n as f64)
}

/// Weighted mean of per-fold variances. Weights must be nonnegative and sum
/// to 1 (they are the folds' evaluated shares).
pub fn combine_variance(vars: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(vars.len(), weights.len(), "one weight per variance");
    assert!(!vars.is_empty(), "nothing to combine");
    let total: f64 = weights.iter().sum();
    assert!(
        weights.iter().all(|w| *w >= 0.0) && (total - 1.0).abs() <= 1e-9,
        "weights must be nonnegative and sum to 1, got sum {total}"
    );
    vars.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Data-driven Bartlett bandwidth for one residual series (plug-in rule with
/// a pilot window). Falls back to the pilot window itself when the pilot
/// long-run sum is not positive.
pub fn auto_bandwidth(residuals: &[f64]) -> Result<usize, VarianceError> {
    let n = residuals.len();
    if n < 16 {
        return Err(VarianceError::TooShortForAuto(n));
    }
    let nf = n as f64;
    let pilot = (4.0 * (nf / 100.0).powf(2.0 / 9.0)).floor() as usize;
    let pilot = pilot.min(n - 1);
    let mean = crate::numeric::compensated_mean(residuals);
    let gamma = |j: usize| -> f64 {
        (j..n).map(|t| (residuals[t] - mean) * (residuals[t - j] - mean)).sum::<f64>() / nf
    };
    let mut s0 = gamma(0);
    let mut s1 = 0.0;
    for j in 1..=pilot.min(n - 1) {
        let g = gamma(j);
        s0 += 2.0 * g;
        s1 += 2.0 * j as f64 * g;
    }
    if s0 <= 0.0 {
        return Ok(pilot);
    }
    let m = (1.1447 * ((s1 / s0) * (s1 / s0)).cbrt() * nf.cbrt()).floor();
    Ok((m.max(0.0) as usize).min(n - 1))
}

/// Standard normal quantile (inverse CDF), accurate to better than 1e-8 over
/// the open unit interval.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    // Rational approximations in three regions (central, two tails).
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |p: f64| -> f64 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail(p)
    } else if p > 1.0 - P_LOW {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Two-sided normal interval `theta ± z_{1-alpha/2} * sqrt(var / count)`.
pub fn confidence_interval(theta: f64, var: f64, count: usize, alpha: f64) -> (f64, f64) {
    assert!(var >= 0.0, "variance must be nonnegative, got {var}");
    assert!(count >= 1, "count must be at least 1");
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0,1), got {alpha}");
    let half = normal_quantile(1.0 - alpha / 2.0) * (var / count as f64).sqrt();
    (theta - half, theta + half)
}

/// How to pick the Bartlett bandwidth for each fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandwidthRule {
    /// Plug-in rule per fold.
    Auto,
    /// One bandwidth everywhere, capped at fold length minus one.
    Fixed(usize),
}

/// A two-sided interval at one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub alpha: f64,
    pub lo: f64,
    pub hi: f64,
}

/// A point estimate with long-run variance, intervals, and run diagnostics.
#[derive(Debug, Clone)]
pub struct IrfEstimate {
    pub horizon: usize,
    pub theta: f64,
    /// Combined long-run variance of the score (nonnegative).
    pub variance: f64,
    /// `sqrt(variance / effective_count)` — the interval half-width per unit
    /// quantile.
    pub std_error: f64,
    pub intervals: Vec<ConfidenceInterval>,
    pub effective_count: usize,
    /// Bandwidth used in each fold, in fold order.
    pub bandwidths: Vec<usize>,
    pub diagnostics: EstimateDiagnostics,
}

impl IrfEstimate {
    /// The interval at `alpha`, if one was requested.
    pub fn interval(&self, alpha: f64) -> Option<&ConfidenceInterval> {
        self.intervals.iter().find(|ci| ci.alpha == alpha)
    }
}

/// Attaches long-run inference to a cross-fitted estimate: per-fold Bartlett
/// variances on the centered residuals, combined by evaluated share, with
/// normal intervals at each requested level.
pub fn estimate_with_inference(
    est: &DmlEstimate,
    rule: BandwidthRule,
    alphas: &[f64],
) -> Result<IrfEstimate, VarianceError> {
    if est.folds.is_empty() {
        return Err(VarianceError::NoFolds);
    }
    for &a in alphas {
        if !(a > 0.0 && a < 1.0) {
            return Err(VarianceError::BadAlpha(a));
        }
    }
    let mut vars = Vec::with_capacity(est.folds.len());
    let mut weights = Vec::with_capacity(est.folds.len());
    let mut bandwidths = Vec::with_capacity(est.folds.len());
    for fold in &est.folds {
        let m = match rule {
            BandwidthRule::Auto => auto_bandwidth(&fold.residuals)?,
            BandwidthRule::Fixed(m) => m.min(fold.residuals.len().saturating_sub(1)),
        };
        vars.push(newey_west_fold(&fold.residuals, m)?);
        weights.push(fold.weight);
        bandwidths.push(m);
    }
    // The Bartlett form is positive semidefinite; negatives are floating-point
    // residue on near-degenerate series.
    let variance = combine_variance(&vars, &weights).max(0.0);
    let std_error = (variance / est.effective_count as f64).sqrt();
    let intervals = alphas
        .iter()
        .map(|&alpha| {
            let (lo, hi) = confidence_interval(est.theta, variance, est.effective_count, alpha);
            ConfidenceInterval { alpha, lo, hi }
        })
        .collect();
    Ok(IrfEstimate {
        horizon: est.horizon,
        theta: est.theta,
        variance,
        std_error,
        intervals,
        effective_count: est.effective_count,
        bandwidths,
        diagnostics: est.diagnostics.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn bartlett_weights_decay_linearly() {
        assert_relative_eq!(bartlett_weight(1, 1), 0.5);
        assert_relative_eq!(bartlett_weight(1, 4), 0.8);
        assert_relative_eq!(bartlett_weight(3, 3), 0.25);
        for m in 1..10 {
            assert_relative_eq!(bartlett_weight(m, m), 1.0 / (m as f64 + 1.0));
        }
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn lag_beyond_bandwidth_panics() {
        bartlett_weight(3, 2);
    }

    #[test]
    fn zero_residuals_have_zero_variance() {
        assert_eq!(newey_west_fold(&[0.0; 8], 2).unwrap(), 0.0);
    }

    #[test]
    fn alternating_series_hand_value() {
        // (1/4) * (4 + 2*0.5*(-3)) = 0.25
        let v = newey_west_fold(&[1.0, -1.0, 1.0, -1.0], 1).unwrap();
        assert_relative_eq!(v, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn zero_bandwidth_is_the_mean_square_exactly() {
        let res = [0.3, -1.2, 0.7, 2.1, -0.4];
        let expect: f64 = res.iter().map(|v| v * v).sum::<f64>() / 5.0;
        assert_eq!(newey_west_fold(&res, 0).unwrap(), expect);
    }

    #[test]
    fn iid_noise_variance_is_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let res: Vec<f64> = (0..100_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let v = newey_west_fold(&res, 0).unwrap();
        assert!((v - 1.0).abs() < 0.02, "got {v}");
    }

    #[test]
    fn bandwidth_longer_than_fold_errors() {
        assert!(matches!(
            newey_west_fold(&[1.0, 2.0], 2),
            Err(VarianceError::FoldTooShort { len: 2, m: 2 })
        ));
    }

    #[test]
    fn doubling_residuals_quadruples_the_variance_exactly() {
        let res = [0.5, -1.25, 2.0, 0.75, -0.5, 1.5];
        let scaled: Vec<f64> = res.iter().map(|v| 2.0 * v).collect();
        for m in 0..4 {
            let a = newey_west_fold(&res, m).unwrap();
            let b = newey_west_fold(&scaled, m).unwrap();
            assert_eq!(b.to_bits(), (4.0 * a).to_bits());
        }
    }

    #[test]
    fn positive_dependence_raises_the_long_run_variance() {
        let res: Vec<f64> = (0..64).map(|t| if (t / 4) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let v0 = newey_west_fold(&res, 0).unwrap();
        let v3 = newey_west_fold(&res, 3).unwrap();
        assert!(v3 > v0);
    }

    #[test]
    fn combined_variance_is_the_weighted_mean() {
        assert_relative_eq!(combine_variance(&[1.0, 3.0], &[0.5, 0.5]), 2.0);
        assert_relative_eq!(combine_variance(&[7.0], &[1.0]), 7.0);
        assert_relative_eq!(combine_variance(&[4.0, 0.0], &[0.25, 0.75]), 1.0);
    }

    #[test]
    #[should_panic(expected = "sum to 1")]
    fn unnormalized_weights_panic() {
        combine_variance(&[1.0, 1.0], &[0.7, 0.6]);
    }

    #[test]
    fn auto_bandwidth_stays_moderate_on_white_noise() {
        // For independent noise the plug-in ratio is pure estimation error,
        // so the selected window drifts up slowly (~n^{2/9}); at n = 10^4 its
        // median sits near 11. Guard the typical size, not the tail.
        let mut windows: Vec<usize> = (0..40)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let res: Vec<f64> =
                    (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                auto_bandwidth(&res).unwrap()
            })
            .collect();
        windows.sort_unstable();
        let median = windows[20];
        assert!(median <= 16, "median white-noise window {median}");
        assert!(*windows.last().unwrap() < 100, "runaway window {:?}", windows.last());
    }

    #[test]
    fn auto_bandwidth_grows_under_moving_average_dependence() {
        let mut hits = 0;
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let z: Vec<f64> = (0..10_006).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let ma: Vec<f64> = (6..10_006).map(|t| z[t - 6..=t].iter().sum()).collect();
            let white: Vec<f64> = z[..10_000].to_vec();
            if auto_bandwidth(&ma).unwrap() > auto_bandwidth(&white).unwrap() {
                hits += 1;
            }
        }
        assert!(hits >= 38, "only {hits}/40 paired draws ranked the MA series higher");
    }

    #[test]
    fn degenerate_series_falls_back_to_the_pilot_window() {
        let res = [0.0; 200];
        // Pilot: floor(4 * 2^(2/9)) = floor(4 * 1.1665) = 4
        assert_eq!(auto_bandwidth(&res).unwrap(), 4);
    }

    #[test]
    fn auto_bandwidth_needs_a_minimum_length() {
        assert!(matches!(
            auto_bandwidth(&[1.0; 15]),
            Err(VarianceError::TooShortForAuto(15))
        ));
    }

    #[test]
    fn normal_quantiles_match_reference_values() {
        let table = [
            (0.5, 0.0),
            (0.975, 1.959963984540054),
            (0.95, 1.6448536269514722),
            (0.05, -1.6448536269514729),
            (0.99, 2.3263478740408408),
            (0.995, 2.5758293035489004),
            (0.999, 3.090232306167813),
            (1e-6, -4.753424308822899),
            (1e-9, -5.9978070150076865),
        ];
        for (p, z) in table {
            assert!(
                (normal_quantile(p) - z).abs() <= 1e-8,
                "quantile({p}) = {} (want {z})",
                normal_quantile(p)
            );
        }
        // Tail symmetry on exactly representable pairs.
        assert_eq!(normal_quantile(0.25), -normal_quantile(0.75));
    }

    #[test]
    fn interval_examples() {
        let (lo, hi) = confidence_interval(0.0, 1.0, 1, 0.05);
        assert!((hi - 1.95996).abs() < 1e-4);
        assert_relative_eq!(lo, -hi);
        let point = confidence_interval(1.5, 0.0, 100, 0.05);
        assert_eq!(point, (1.5, 1.5));
        let (lo99, hi99) = confidence_interval(0.0, 1.0, 1, 0.01);
        assert!(hi99 > hi && lo99 < lo);
        // Quadrupling the count halves the width.
        let (_, hi4) = confidence_interval(0.0, 1.0, 4, 0.05);
        assert_relative_eq!(hi4, hi / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn inference_glue_combines_folds() {
        use crate::crossfit::{DmlEstimate, EstimateDiagnostics, FoldEstimate};
        let folds = vec![
            FoldEstimate {
                fold: 0,
                start: 0,
                theta: 1.0,
                weight: 0.5,
                residuals: vec![1.0, -1.0, 1.0, -1.0],
            },
            FoldEstimate {
                fold: 1,
                start: 8,
                theta: 3.0,
                weight: 0.5,
                residuals: vec![0.0, 0.0, 0.0, 0.0],
            },
        ];
        let est = DmlEstimate {
            horizon: 0,
            theta: 2.0,
            folds,
            effective_count: 8,
            diagnostics: EstimateDiagnostics::default(),
        };
        let irf = estimate_with_inference(&est, BandwidthRule::Fixed(1), &[0.05]).unwrap();
        // Fold variances 0.25 and 0; combined 0.125; SE = sqrt(0.125/8).
        assert_relative_eq!(irf.variance, 0.125, epsilon = 1e-15);
        assert_relative_eq!(irf.std_error, (0.125f64 / 8.0).sqrt(), epsilon = 1e-15);
        assert_eq!(irf.bandwidths, vec![1, 1]);
        let ci = irf.interval(0.05).unwrap();
        assert!(ci.lo < 2.0 && 2.0 < ci.hi);
        assert_relative_eq!(
            ci.hi - ci.lo,
            2.0 * normal_quantile(0.975) * irf.std_error,
            max_relative = 1e-12
        );
    }

    #[test]
    fn fixed_bandwidth_is_capped_by_fold_length() {
        use crate::crossfit::{DmlEstimate, EstimateDiagnostics, FoldEstimate};
        let est = DmlEstimate {
            horizon: 0,
            theta: 0.0,
            folds: vec![FoldEstimate {
                fold: 0,
                start: 0,
                theta: 0.0,
                weight: 1.0,
                residuals: vec![1.0, -1.0, 0.5],
            }],
            effective_count: 3,
            diagnostics: EstimateDiagnostics::default(),
        };
        let irf = estimate_with_inference(&est, BandwidthRule::Fixed(10), &[0.05]).unwrap();
        assert_eq!(irf.bandwidths, vec![2]);
        assert!(irf.variance >= 0.0);
    }
}
