//! Doubly robust scoring of a horizon sample.
//!
//! Given nuisance values `(mu1, mu0, e)` at each index, the score of an
//! observation `(y_fwd, d, x)` is
//!
//! ```text
//! g = mu1 - mu0 + d/e * (y_fwd - mu1) - (1-d)/(1-e) * (y_fwd - mu0)
//! ```
//!
//! whose mean over the sample estimates the average treatment effect at the
//! sample's horizon. The score is doubly robust: its expectation equals the
//! target when either the outcome regressions or the propensity are correct.
//!
//! Everything here is a pure function, safe to evaluate in parallel.

use crate::numeric::compensated_mean;
use crate::panel::HorizonSample;
use thiserror::Error;

/// Default clipping margin for fitted propensities. Tree ensembles can emit
/// leaf probabilities of exactly 0 or 1, which the score cannot divide by.
pub const DEFAULT_PROPENSITY_ETA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("overlap violation: propensity {e} outside (0,1)")]
    OverlapViolation { e: f64 },
    #[error("nuisance values cover {nuisances} indices but the sample has {sample}")]
    CoverageMismatch { sample: usize, nuisances: usize },
    #[error("score at index {t} is not finite")]
    NonFiniteScore { t: usize },
}

/// Outcome-regression and propensity estimates at one time index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceEntry {
    /// Estimate of E[y_fwd | d=1, x].
    pub mu1: f64,
    /// Estimate of E[y_fwd | d=0, x].
    pub mu0: f64,
    /// Estimate of Pr(d=1 | x), strictly inside (0,1).
    pub e: f64,
}

/// Clamps a fitted propensity into `[eta, 1-eta]`. Returns the clipped value
/// and whether clipping changed it, so callers can count interventions as a
/// diagnostic.
pub fn clip_propensity(e: f64, eta: f64) -> (f64, bool) {
    debug_assert!(eta > 0.0 && eta < 0.5, "eta must lie in (0, 0.5)");
    if e < eta {
        (eta, true)
    } else if e > 1.0 - eta {
        (1.0 - eta, true)
    } else {
        (e, false)
    }
}

/// The doubly robust score of one observation under a binary treatment.
pub fn dr_score(y_fwd: f64, d: u8, nv: NuisanceEntry) -> Result<f64, ScoreError> {
    if !(nv.e > 0.0 && nv.e < 1.0) {
        return Err(ScoreError::OverlapViolation { e: nv.e });
    }
    // Delegating keeps the binary and multilevel paths bit-identical.
    dr_score_multilevel(y_fwd, d, 1, 0, nv.mu1, nv.mu0, nv.e, 1.0 - nv.e)
}

/// The pairwise doubly robust score for a discrete treatment: `target` level
/// contrasted against `baseline`. With codes `{0,1}`, `target=1`,
/// `baseline=0`, and `e_base = 1 - e_target` this reduces exactly to
/// [`dr_score`]. Observations at other levels contribute only the
/// regression contrast `mu_target - mu_base`.
#[allow(clippy::too_many_arguments)]
pub fn dr_score_multilevel(
    y_fwd: f64,
    d: u8,
    target: u8,
    baseline: u8,
    mu_target: f64,
    mu_base: f64,
    e_target: f64,
    e_base: f64,
) -> Result<f64, ScoreError> {
    if !(e_target > 0.0) {
        return Err(ScoreError::OverlapViolation { e: e_target });
    }
    if !(e_base > 0.0) {
        return Err(ScoreError::OverlapViolation { e: e_base });
    }
    debug_assert!(
        e_target + e_base <= 1.0 + 1e-12,
        "level propensities must not sum past 1"
    );
    let mut g = mu_target - mu_base;
    if d == target {
        g += (y_fwd - mu_target) / e_target;
    }
    if d == baseline {
        g -= (y_fwd - mu_base) / e_base;
    }
    Ok(g)
}

/// Scores every index of the sample. `nv[t]` must describe entry `t`.
pub fn score_series(
    sample: &HorizonSample,
    nv: &[NuisanceEntry],
) -> Result<Vec<f64>, ScoreError> {
    if nv.len() != sample.len() {
        return Err(ScoreError::CoverageMismatch {
            sample: sample.len(),
            nuisances: nv.len(),
        });
    }
    let mut g = Vec::with_capacity(sample.len());
    for t in 0..sample.len() {
        let v = dr_score(sample.y_fwd()[t], sample.d()[t], nv[t])?;
        if !v.is_finite() {
            return Err(ScoreError::NonFiniteScore { t });
        }
        g.push(v);
    }
    Ok(g)
}

/// Mean doubly robust score over the whole sample — the estimator one would
/// use if the nuisance functions were known rather than fitted. Summation is
/// compensated so the mean stays stable on long series.
pub fn oracle_estimate(sample: &HorizonSample, nv: &[NuisanceEntry]) -> Result<f64, ScoreError> {
    let g = score_series(sample, nv)?;
    Ok(compensated_mean(&g))
}
