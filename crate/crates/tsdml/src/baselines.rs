//! Comparison estimators: regression adjustment (in-sample and cross-fitted)
//! and local projections.
//!
//! Regression adjustment averages the fitted outcome contrast
//! `mu1(x) - mu0(x)` — with a split plan it reuses the cross-fitting fold
//! layout (RA^c), without one it fits and evaluates on the whole series (RA).
//! Local projection regresses the forward outcome on `[1, d, x]` by least
//! squares and reads the treatment coefficient. All three report inference
//! through the same long-run variance machinery as the main estimator,
//! applied to each method's per-index contributions.

use crate::crossfit::{
    combine, evaluate_fold_binary, evaluate_folds, CrossfitError, EstimateDiagnostics,
    FoldEstimate, FoldEvaluation, NuisanceConfig, SplitPlan,
};
use crate::panel::HorizonSample;
use crate::score::NuisanceEntry;
use crate::variance::{estimate_with_inference, BandwidthRule, IrfEstimate, VarianceError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Crossfit(#[from] CrossfitError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
    #[error("design matrix is rank deficient: column(s) {0:?} are collinear")]
    Collinear(Vec<String>),
    #[error("nuisance values cover {values} indices but the sample has {sample}")]
    ValueCoverage { sample: usize, values: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    /// Outcome-contrast mean, fitted and evaluated in-sample.
    RegressionAdjustment,
    /// Outcome-contrast mean under a cross-fitting plan.
    CrossFitRegressionAdjustment,
    /// Least-squares coefficient of the treatment in a linear projection.
    LocalProjection,
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMethod::RegressionAdjustment => "RA",
            BaselineMethod::CrossFitRegressionAdjustment => "RA^c",
            BaselineMethod::LocalProjection => "LP",
        })
    }
}

/// One comparison estimate, shaped like the main estimator's output.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    pub estimate: IrfEstimate,
}

fn contrast_estimate(
    horizon: usize,
    evaluations: &[FoldEvaluation],
    gap_below_horizon: bool,
) -> crate::crossfit::DmlEstimate {
    let mut diagnostics =
        EstimateDiagnostics { gap_below_horizon, ..Default::default() };
    let per_fold = evaluations
        .iter()
        .map(|ev| {
            diagnostics.train_arms.push(ev.train_arms);
            let scores: Vec<f64> =
                ev.mu1.iter().zip(&ev.mu0).map(|(m1, m0)| m1 - m0).collect();
            (ev.fold, ev.eval.start, scores)
        })
        .collect();
    combine(horizon, per_fold, diagnostics)
}

/// Regression adjustment from already-evaluated folds (shares nuisance fits
/// with the main estimator — only `mu1`/`mu0` are read). Works for both the
/// one-sample plan layout and the two-sample layout, since only the fold
/// evaluations are consumed.
pub fn regression_adjustment_from_evaluations(
    sample: &HorizonSample,
    plan: &SplitPlan,
    evaluations: &[FoldEvaluation],
    rule: BandwidthRule,
    alphas: &[f64],
) -> Result<BaselineResult, BaselineError> {
    let est = contrast_estimate(sample.horizon(), evaluations, plan.k_t() < sample.horizon());
    Ok(BaselineResult {
        method: BaselineMethod::CrossFitRegressionAdjustment,
        estimate: estimate_with_inference(&est, rule, alphas)?,
    })
}

/// Cross-fitted regression adjustment over two independent samples, from
/// evaluations produced by [`crate::crossfit::evaluate_two_samples`].
pub fn regression_adjustment_two_samples_from_evaluations(
    horizon: usize,
    evaluations: &[FoldEvaluation],
    rule: BandwidthRule,
    alphas: &[f64],
) -> Result<BaselineResult, BaselineError> {
    let est = contrast_estimate(horizon, evaluations, false);
    Ok(BaselineResult {
        method: BaselineMethod::CrossFitRegressionAdjustment,
        estimate: estimate_with_inference(&est, rule, alphas)?,
    })
}

/// Mean fitted outcome contrast. With a plan, nuisances are cross-fitted on
/// the plan's folds; without one they are fitted once on the whole series and
/// evaluated in-sample.
pub fn regression_adjustment(
    sample: &HorizonSample,
    plan: Option<&SplitPlan>,
    cfg: &NuisanceConfig,
    rule: BandwidthRule,
    alphas: &[f64],
) -> Result<BaselineResult, BaselineError> {
    match plan {
        Some(plan) => {
            let evaluations = evaluate_folds(sample, plan, cfg, false)?;
            regression_adjustment_from_evaluations(sample, plan, &evaluations, rule, alphas)
        }
        None => {
            let all = [0..sample.len()];
            let ev = evaluate_fold_binary(
                sample,
                &all,
                sample,
                0..sample.len(),
                cfg,
                0,
                false,
            )?;
            let est = contrast_estimate(sample.horizon(), std::slice::from_ref(&ev), false);
            Ok(BaselineResult {
                method: BaselineMethod::RegressionAdjustment,
                estimate: estimate_with_inference(&est, rule, alphas)?,
            })
        }
    }
}

/// Regression adjustment with caller-supplied outcome values (index-aligned
/// with the sample; only `mu1`/`mu0` of each entry are read). With a plan the
/// contrast is averaged fold by fold, without one over the whole series.
pub fn regression_adjustment_from_values(
    sample: &HorizonSample,
    plan: Option<&SplitPlan>,
    values: &[NuisanceEntry],
    rule: BandwidthRule,
    alphas: &[f64],
) -> Result<BaselineResult, BaselineError> {
    if values.len() != sample.len() {
        return Err(BaselineError::ValueCoverage {
            sample: sample.len(),
            values: values.len(),
        });
    }
    let contrast = |range: std::ops::Range<usize>| -> Vec<f64> {
        range.map(|t| values[t].mu1 - values[t].mu0).collect()
    };
    let (method, per_fold) = match plan {
        Some(plan) => (
            BaselineMethod::CrossFitRegressionAdjustment,
            plan.folds()
                .iter()
                .enumerate()
                .map(|(i, f)| (i, f.eval.start, contrast(f.eval.clone())))
                .collect(),
        ),
        None => (
            BaselineMethod::RegressionAdjustment,
            vec![(0, 0, contrast(0..sample.len()))],
        ),
    };
    let est = combine(sample.horizon(), per_fold, EstimateDiagnostics::default());
    Ok(BaselineResult { method, estimate: estimate_with_inference(&est, rule, alphas)? })
}

const LP_COLS_FIXED: usize = 2; // intercept, treatment

fn lp_column_name(j: usize) -> String {
    match j {
        0 => "intercept".to_string(),
        1 => "treatment".to_string(),
        _ => format!("confounder {}", j - LP_COLS_FIXED),
    }
}

/// Least squares of the forward outcome on `[1, d, x]`; the estimate is the
/// treatment coefficient. Inference runs the long-run variance machinery on
/// the coefficient's per-index influence contributions
/// `((Z'Z/T)^{-1} z_t)_treatment * residual_t`.
pub fn local_projection(
    sample: &HorizonSample,
    rule: BandwidthRule,
    alphas: &[f64],
) -> Result<BaselineResult, BaselineError> {
    let t = sample.len();
    let p = sample.n_confounders();
    let cols = LP_COLS_FIXED + p;
    let mut z = DMatrix::zeros(t, cols);
    for r in 0..t {
        z[(r, 0)] = 1.0;
        z[(r, 1)] = f64::from(sample.d()[r]);
        for j in 0..p {
            z[(r, LP_COLS_FIXED + j)] = sample.x_row(r)[j];
        }
    }
    let y = DVector::from_column_slice(sample.y_fwd());

    let qr = z.clone().qr();
    let r_mat = qr.r();
    let max_diag = (0..cols).map(|j| r_mat[(j, j)].abs()).fold(0.0f64, f64::max);
    let tol = f64::EPSILON * t.max(cols) as f64 * max_diag;
    let collinear: Vec<String> = (0..cols)
        .filter(|&j| r_mat[(j, j)].abs() <= tol)
        .map(lp_column_name)
        .collect();
    if !collinear.is_empty() {
        return Err(BaselineError::Collinear(collinear));
    }
    let qty = qr.q().transpose() * &y;
    let beta = r_mat
        .solve_upper_triangular(&qty.rows(0, cols).into_owned())
        .ok_or_else(|| BaselineError::Collinear(vec!["unknown".to_string()]))?;
    let theta = beta[1];

    // Influence row for the treatment coefficient: s = T * (R'R)^{-1} e_1,
    // so each index contributes (z_t . s) * residual_t.
    let mut e1 = DVector::zeros(cols);
    e1[1] = 1.0;
    let w = r_mat
        .transpose()
        .solve_lower_triangular(&e1)
        .ok_or_else(|| BaselineError::Collinear(vec!["treatment".to_string()]))?;
    let s = r_mat
        .solve_upper_triangular(&w)
        .ok_or_else(|| BaselineError::Collinear(vec!["treatment".to_string()]))?
        * t as f64;
    let fitted = &z * &beta;
    let contributions: Vec<f64> = (0..t)
        .map(|r| {
            let zs: f64 = (0..cols).map(|j| z[(r, j)] * s[j]).sum();
            zs * (y[r] - fitted[r])
        })
        .collect();

    let est = crate::crossfit::DmlEstimate {
        horizon: sample.horizon(),
        theta,
        folds: vec![FoldEstimate {
            fold: 0,
            start: 0,
            theta,
            weight: 1.0,
            residuals: contributions,
        }],
        effective_count: t,
        diagnostics: EstimateDiagnostics::default(),
    };
    Ok(BaselineResult {
        method: BaselineMethod::LocalProjection,
        estimate: estimate_with_inference(&est, rule, alphas)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossfit::{make_split_plan, GapSide, ModelSpec};
    use crate::learners::ForestSpec;
    use crate::panel::{build_horizon_sample, Panel};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noisy_sample(t: usize, seed: u64) -> HorizonSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..t)
            .map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let d: Vec<u8> = (0..t).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        let y: Vec<f64> = (0..t)
            .map(|i| x[i][0] + 2.0 * f64::from(d[i]) + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let panel = Panel::new(y, d, x, vec![0, 1]).unwrap();
        build_horizon_sample(&panel, 0).unwrap()
    }

    #[test]
    fn identical_outcome_models_give_zero() {
        let sample = noisy_sample(80, 1);
        let values: Vec<NuisanceEntry> = (0..80)
            .map(|t| NuisanceEntry { mu1: (t as f64).sin(), mu0: (t as f64).sin(), e: 0.5 })
            .collect();
        let res =
            regression_adjustment_from_values(&sample, None, &values, BandwidthRule::Fixed(0), &[])
                .unwrap();
        assert_eq!(res.method, BaselineMethod::RegressionAdjustment);
        assert_eq!(res.estimate.theta, 0.0);
        assert_eq!(res.estimate.variance, 0.0);
    }

    #[test]
    fn cross_fit_contrast_with_fixed_values_equals_the_plain_mean() {
        // When every index is evaluated once, fold-weighted contrast means
        // reduce to the overall contrast mean whatever the fold layout.
        let sample = noisy_sample(120, 2);
        let plan = make_split_plan(120, 3, 6, GapSide::Train).unwrap();
        let values: Vec<NuisanceEntry> = (0..120)
            .map(|t| NuisanceEntry {
                mu1: (t as f64 * 0.11).cos() + 0.7,
                mu0: (t as f64 * 0.11).cos(),
                e: 0.5,
            })
            .collect();
        let ra_c = regression_adjustment_from_values(
            &sample,
            Some(&plan),
            &values,
            BandwidthRule::Fixed(0),
            &[0.05],
        )
        .unwrap();
        let ra = regression_adjustment_from_values(
            &sample,
            None,
            &values,
            BandwidthRule::Fixed(0),
            &[0.05],
        )
        .unwrap();
        assert_eq!(ra_c.method, BaselineMethod::CrossFitRegressionAdjustment);
        assert_relative_eq!(ra_c.estimate.theta, ra.estimate.theta, epsilon = 1e-12);
        assert_relative_eq!(ra_c.estimate.theta, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn fitted_regression_adjustment_recovers_a_constant_effect() {
        let sample = noisy_sample(400, 3);
        let spec = ModelSpec::Forest(ForestSpec { n_trees: 30, ..ForestSpec::regression() });
        let cfg = NuisanceConfig {
            mu1: spec.clone(),
            mu0: spec.clone(),
            e: ModelSpec::Forest(ForestSpec { n_trees: 5, ..ForestSpec::classification() }),
            ..NuisanceConfig::default()
        };
        let res =
            regression_adjustment(&sample, None, &cfg, BandwidthRule::Auto, &[0.05]).unwrap();
        assert!((res.estimate.theta - 2.0).abs() < 0.5, "theta = {}", res.estimate.theta);
        assert!(res.estimate.variance > 0.0);
    }

    #[test]
    fn noise_free_projection_recovers_the_coefficient_exactly() {
        let t = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Vec<f64>> = (0..t).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let d: Vec<u8> = (0..t).map(|i| (i % 3 == 0) as u8).collect();
        let y: Vec<f64> = (0..t).map(|i| 2.0 * f64::from(d[i])).collect();
        let panel = Panel::new(y, d, x, vec![0, 1]).unwrap();
        let sample = build_horizon_sample(&panel, 0).unwrap();
        let res = local_projection(&sample, BandwidthRule::Fixed(0), &[0.05]).unwrap();
        assert_relative_eq!(res.estimate.theta, 2.0, epsilon = 1e-10);
        // Exact fit: residuals vanish, so the interval collapses.
        assert!(res.estimate.variance < 1e-20);
    }

    #[test]
    fn projection_matches_a_normal_equations_solve() {
        let sample = noisy_sample(300, 4);
        let res = local_projection(&sample, BandwidthRule::Fixed(0), &[]).unwrap();

        let t = sample.len();
        let p = sample.n_confounders();
        let cols = 2 + p;
        let mut z = DMatrix::zeros(t, cols);
        for r in 0..t {
            z[(r, 0)] = 1.0;
            z[(r, 1)] = f64::from(sample.d()[r]);
            for j in 0..p {
                z[(r, 2 + j)] = sample.x_row(r)[j];
            }
        }
        let y = DVector::from_column_slice(sample.y_fwd());
        let ztz = z.transpose() * &z;
        let zty = z.transpose() * &y;
        let beta = ztz.lu().solve(&zty).unwrap();
        assert_relative_eq!(res.estimate.theta, beta[1], max_relative = 1e-8);
    }

    #[test]
    fn duplicated_confounder_is_reported_collinear() {
        let t = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                vec![v, v]
            })
            .collect();
        let d: Vec<u8> = (0..t).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let panel = Panel::new(y, d, x, vec![0, 1]).unwrap();
        let sample = build_horizon_sample(&panel, 0).unwrap();
        let err = local_projection(&sample, BandwidthRule::Fixed(0), &[]).unwrap_err();
        match err {
            BaselineError::Collinear(cols) => {
                assert!(cols.iter().any(|c| c.contains("confounder")), "{cols:?}");
            }
            other => panic!("expected collinearity, got {other}"),
        }
    }

    #[test]
    fn projection_interval_covers_an_unrelated_treatment() {
        // D independent of Y given X in a linear model: coefficient near 0.
        let t = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<Vec<f64>> = (0..t).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let d: Vec<u8> = (0..t).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let y: Vec<f64> =
            (0..t).map(|i| 1.5 * x[i][0] + rng.sample::<f64, _>(StandardNormal)).collect();
        let panel = Panel::new(y, d, x, vec![0, 1]).unwrap();
        let sample = build_horizon_sample(&panel, 0).unwrap();
        let res = local_projection(&sample, BandwidthRule::Auto, &[0.05]).unwrap();
        assert!(
            res.estimate.theta.abs() < 3.0 * res.estimate.std_error,
            "theta = {}, se = {}",
            res.estimate.theta,
            res.estimate.std_error
        );
    }
}
