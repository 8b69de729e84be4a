//! Cross-fitting with dependence gaps, and the DML point estimators built on
//! it.
//!
//! A split plan cuts the evaluation range into contiguous folds. Each fold is
//! scored with nuisance models fitted on the other folds' indices, minus a
//! gap of `k_t` observations at every train/evaluation boundary so that
//! serial dependence cannot leak fitted noise into the scores. The gap can be
//! charged to the training side (every index still gets evaluated — the
//! small-sample default), the evaluation side, or split across both (which
//! reproduces the symmetric two-subsample layout: `t=100, k=2, k_t=20` gives
//! evaluation folds `[0,40)` and `[60,100)`).
//!
//! The estimator per fold is the mean doubly robust score; folds combine by
//! their evaluated share. All fits derive their RNG seed from
//! `(config seed, fold, nuisance role)`, so results are independent of fold
//! processing order and of which other nuisances are fitted alongside.

use crate::learners::{
    fit_boosted_classifier, fit_boosted_trees, fit_forest_classification, fit_forest_regression,
    BoostSpec, ForestSpec, LearnerError, ProbabilityModel, RegressionModel,
};
use crate::numeric::{compensated_mean, derive_seed};
use crate::panel::HorizonSample;
use crate::score::{clip_propensity, dr_score, dr_score_multilevel, NuisanceEntry, ScoreError};
use ndarray::Array2;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrossfitError {
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("split plan covers {plan} indices but the sample has {sample}")]
    PlanMismatch { plan: usize, sample: usize },
    #[error("fold {fold}: training data has {count} rows with treatment {arm}; need at least 2")]
    ArmStarvation { fold: usize, arm: u8, count: usize },
    #[error("samples have different horizons: {0} vs {1}")]
    HorizonMismatch(usize, usize),
    #[error("samples have different confounder widths: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("binary pipeline requires treatment codes {{0,1}}, got {0:?}")]
    NonBinaryCodes(Vec<u8>),
    #[error("baseline code {0} is not in the declared code set")]
    BadBaseline(u8),
    #[error("nuisance values cover {values} indices but the sample has {sample}")]
    ValueCoverage { sample: usize, values: usize },
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Which side of each train/evaluation boundary gives up the gap indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapSide {
    /// Training loses `k_t` next to the evaluation fold; everything is
    /// evaluated. The small-sample default.
    Train,
    /// Evaluation shrinks by `k_t` at each internal boundary; training keeps
    /// every index outside the fold.
    Eval,
    /// Evaluation loses `floor(k_t/2)`, training the remainder — the
    /// symmetric two-subsample layout.
    Both,
}

/// One fold: the indices it evaluates and the index ranges its nuisances may
/// train on.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub eval: Range<usize>,
    pub train: Vec<Range<usize>>,
}

impl Fold {
    pub fn train_len(&self) -> usize {
        self.train.iter().map(|r| r.len()).sum()
    }

    pub fn train_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().flat_map(|r| r.clone())
    }
}

/// A complete fold layout over `0..len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    folds: Vec<Fold>,
    k_t: usize,
    gap_side: GapSide,
    len: usize,
}

impl SplitPlan {
    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn k_t(&self) -> usize {
        self.k_t
    }

    pub fn gap_side(&self) -> GapSide {
        self.gap_side
    }

    /// Length of the index range the plan was built for.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Total number of evaluated indices across folds.
    pub fn evaluated_count(&self) -> usize {
        self.folds.iter().map(|f| f.eval.len()).sum()
    }
}

/// Plans `k` near-equal contiguous folds over `0..t` with a dependence gap of
/// `k_t` at each train/evaluation boundary, charged per `gap_side`.
pub fn make_split_plan(
    t: usize,
    k: usize,
    k_t: usize,
    gap_side: GapSide,
) -> Result<SplitPlan, CrossfitError> {
    if k < 2 {
        return Err(CrossfitError::DegenerateSplit(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if t <= k + k * k_t {
        return Err(CrossfitError::DegenerateSplit(format!(
            "need t > k*(1 + k_t); got t={t}, k={k}, k_t={k_t}"
        )));
    }
    let (eval_trim, train_trim) = match gap_side {
        GapSide::Train => (0, k_t),
        GapSide::Eval => (k_t, 0),
        GapSide::Both => (k_t / 2, k_t - k_t / 2),
    };
    let base = t / k;
    let remainder = t % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0usize;
    for i in 0..k {
        let len = base + usize::from(i < remainder);
        let (a, b) = (start, start + len);
        start = b;
        let eval_start = if a > 0 { a + eval_trim } else { a };
        let eval_end = if b < t { b.saturating_sub(eval_trim) } else { b };
        if eval_start >= eval_end {
            return Err(CrossfitError::DegenerateSplit(format!(
                "fold {i} has no evaluation indices left after trimming {eval_trim} per side"
            )));
        }
        let mut train = Vec::with_capacity(2);
        let left_end = a.saturating_sub(train_trim);
        if left_end > 0 {
            train.push(0..left_end);
        }
        let right_start = (b + train_trim).min(t);
        if right_start < t {
            train.push(right_start..t);
        }
        if train.is_empty() {
            return Err(CrossfitError::DegenerateSplit(format!(
                "fold {i} has an empty training set (t={t}, k={k}, k_t={k_t})"
            )));
        }
        folds.push(Fold { eval: eval_start..eval_end, train });
    }
    Ok(SplitPlan { folds, k_t, gap_side, len: t })
}

/// Which learner fits a nuisance function. The spec's own `seed` field is
/// ignored inside cross-fitting: seeds derive from the config seed, the fold,
/// and the nuisance role. Boosting here runs for its configured number of
/// rounds (early stopping needs a held-out set, which cross-fitting does not
/// have); tune rounds beforehand.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    Forest(ForestSpec),
    Boost(BoostSpec),
}

/// Learner configuration for the binary-treatment pipeline: one model per
/// nuisance role, fitted per arm (treated/control outcome regressions) plus a
/// propensity classifier.
#[derive(Debug, Clone)]
pub struct NuisanceConfig {
    pub mu1: ModelSpec,
    pub mu0: ModelSpec,
    pub e: ModelSpec,
    /// Propensity clipping margin.
    pub eta: f64,
    pub seed: u64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            mu1: ModelSpec::Forest(ForestSpec::regression()),
            mu0: ModelSpec::Forest(ForestSpec::regression()),
            e: ModelSpec::Forest(ForestSpec::classification()),
            eta: crate::score::DEFAULT_PROPENSITY_ETA,
            seed: 0,
        }
    }
}

/// Learner configuration for discrete treatments with more than two levels:
/// one joint outcome model over treatment dummies and a multiclass
/// propensity.
#[derive(Debug, Clone)]
pub struct MultilevelConfig {
    pub outcome: ModelSpec,
    pub propensity: ModelSpec,
    pub baseline: u8,
    pub eta: f64,
    pub seed: u64,
}

/// Fitted nuisance values over one fold's evaluation indices.
#[derive(Debug, Clone)]
pub struct FoldEvaluation {
    pub fold: usize,
    pub eval: Range<usize>,
    /// Fitted E[y_fwd | d=1, x] per evaluated index.
    pub mu1: Vec<f64>,
    /// Fitted E[y_fwd | d=0, x] per evaluated index.
    pub mu0: Vec<f64>,
    /// Clipped propensity per evaluated index (empty when not fitted).
    pub e: Vec<f64>,
    /// How many propensity values clipping changed.
    pub clip_events: usize,
    /// (treated, control) rows in this fold's training data.
    pub train_arms: (usize, usize),
}

/// One fold's contribution to the estimator.
#[derive(Debug, Clone)]
pub struct FoldEstimate {
    pub fold: usize,
    /// Start of the fold's evaluation range (residuals are contiguous from
    /// here).
    pub start: usize,
    /// Mean score over the fold.
    pub theta: f64,
    /// Evaluated share: fold count over total evaluated count.
    pub weight: f64,
    /// Scores minus the combined estimate, in evaluation order.
    pub residuals: Vec<f64>,
}

impl FoldEstimate {
    pub fn count(&self) -> usize {
        self.residuals.len()
    }
}

/// Run-level health counters for one estimate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateDiagnostics {
    /// Propensity values moved by clipping.
    pub clip_events: usize,
    /// (treated, control) training rows per fold.
    pub train_arms: Vec<(usize, usize)>,
    /// The plan's gap is smaller than the sample's horizon.
    pub gap_below_horizon: bool,
}

/// A cross-fitted point estimate with everything inference needs.
#[derive(Debug, Clone)]
pub struct DmlEstimate {
    pub horizon: usize,
    pub theta: f64,
    pub folds: Vec<FoldEstimate>,
    /// Total evaluated indices (the `1/sqrt(count)` scale for inference).
    pub effective_count: usize,
    pub diagnostics: EstimateDiagnostics,
}

fn require_binary(sample: &HorizonSample) -> Result<(), CrossfitError> {
    if sample.codes() != [0, 1] {
        return Err(CrossfitError::NonBinaryCodes(sample.codes().to_vec()));
    }
    Ok(())
}

fn fit_regression(
    spec: &ModelSpec,
    x: &Array2<f64>,
    y: &[f64],
    seed: u64,
) -> Result<Box<dyn RegressionModel>, LearnerError> {
    match spec {
        ModelSpec::Forest(fs) => {
            let spec = ForestSpec { seed, ..fs.clone() };
            Ok(Box::new(fit_forest_regression(x.view(), y, &spec)?))
        }
        ModelSpec::Boost(bs) => {
            let spec = BoostSpec { seed, early_stop_patience: None, ..bs.clone() };
            Ok(Box::new(fit_boosted_trees(x.view(), y, &spec, None)?))
        }
    }
}

fn fit_classification(
    spec: &ModelSpec,
    x: &Array2<f64>,
    labels: &[u8],
    seed: u64,
) -> Result<Box<dyn ProbabilityModel>, LearnerError> {
    match spec {
        ModelSpec::Forest(fs) => {
            let spec = ForestSpec { seed, ..fs.clone() };
            Ok(Box::new(fit_forest_classification(x.view(), labels, &spec)?))
        }
        ModelSpec::Boost(bs) => {
            let spec = BoostSpec { seed, early_stop_patience: None, ..bs.clone() };
            Ok(Box::new(fit_boosted_classifier(x.view(), labels, &spec, None)?))
        }
    }
}

/// Gathers the training rows of `sample` listed by `ranges` (ascending),
/// optionally restricted to one treatment arm.
fn gather_training(
    sample: &HorizonSample,
    ranges: &[Range<usize>],
    arm: Option<u8>,
) -> (Array2<f64>, Vec<f64>, Vec<u8>) {
    let p = sample.n_confounders();
    let mut flat = Vec::new();
    let mut y = Vec::new();
    let mut d = Vec::new();
    for range in ranges {
        for t in range.clone() {
            if let Some(a) = arm {
                if sample.d()[t] != a {
                    continue;
                }
            }
            flat.extend_from_slice(sample.x_row(t));
            y.push(sample.y_fwd()[t]);
            d.push(sample.d()[t]);
        }
    }
    let rows = y.len();
    let x = Array2::from_shape_vec((rows, p), flat).expect("row-major gather");
    (x, y, d)
}

/// Fits the binary nuisances for one fold's training data and evaluates them
/// over `eval` of `eval_sample`. `fold` keys the RNG seeds; each nuisance
/// role has a fixed stream so fitting or skipping the propensity never
/// changes the outcome fits.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate_fold_binary(
    train_sample: &HorizonSample,
    ranges: &[Range<usize>],
    eval_sample: &HorizonSample,
    eval: Range<usize>,
    cfg: &NuisanceConfig,
    fold: usize,
    fit_propensity: bool,
) -> Result<FoldEvaluation, CrossfitError> {
    let (x_all, _, d_all) = gather_training(train_sample, ranges, None);
    let treated = d_all.iter().filter(|&&d| d == 1).count();
    let control = d_all.len() - treated;
    for (arm, count) in [(1u8, treated), (0u8, control)] {
        if count < 2 {
            return Err(CrossfitError::ArmStarvation { fold, arm, count });
        }
    }

    let fit_seed = derive_seed(cfg.seed, fold as u64);
    let (x1, y1, _) = gather_training(train_sample, ranges, Some(1));
    let mu1 = fit_regression(&cfg.mu1, &x1, &y1, derive_seed(fit_seed, 0))?;
    let (x0, y0, _) = gather_training(train_sample, ranges, Some(0));
    let mu0 = fit_regression(&cfg.mu0, &x0, &y0, derive_seed(fit_seed, 1))?;
    let e_model = if fit_propensity {
        Some(fit_classification(&cfg.e, &x_all, &d_all, derive_seed(fit_seed, 2))?)
    } else {
        None
    };

    let m = eval.len();
    let mut mu1_v = Vec::with_capacity(m);
    let mut mu0_v = Vec::with_capacity(m);
    let mut e_v = Vec::with_capacity(if fit_propensity { m } else { 0 });
    let mut clip_events = 0usize;
    for t in eval.clone() {
        let x = eval_sample.x_row(t);
        mu1_v.push(mu1.predict(x));
        mu0_v.push(mu0.predict(x));
        if let Some(model) = &e_model {
            let (e, clipped) = clip_propensity(model.prob_of(x, 1), cfg.eta);
            if clipped {
                clip_events += 1;
            }
            e_v.push(e);
        }
    }
    Ok(FoldEvaluation {
        fold,
        eval,
        mu1: mu1_v,
        mu0: mu0_v,
        e: e_v,
        clip_events,
        train_arms: (treated, control),
    })
}

/// Fits and evaluates every fold of `plan` on `sample`. With
/// `fit_propensity=false` only the outcome regressions are fitted (their
/// seeds do not change), which is what pure regression adjustment needs.
pub fn evaluate_folds(
    sample: &HorizonSample,
    plan: &SplitPlan,
    cfg: &NuisanceConfig,
    fit_propensity: bool,
) -> Result<Vec<FoldEvaluation>, CrossfitError> {
    require_binary(sample)?;
    if plan.len() != sample.len() {
        return Err(CrossfitError::PlanMismatch { plan: plan.len(), sample: sample.len() });
    }
    plan.folds
        .iter()
        .enumerate()
        .map(|(i, fold)| {
            evaluate_fold_binary(
                sample,
                &fold.train,
                sample,
                fold.eval.clone(),
                cfg,
                i,
                fit_propensity,
            )
        })
        .collect()
}

fn scores_for_fold(
    sample: &HorizonSample,
    ev: &FoldEvaluation,
) -> Result<Vec<f64>, ScoreError> {
    let mut scores = Vec::with_capacity(ev.eval.len());
    for (i, t) in ev.eval.clone().enumerate() {
        let nv = NuisanceEntry { mu1: ev.mu1[i], mu0: ev.mu0[i], e: ev.e[i] };
        let g = dr_score(sample.y_fwd()[t], sample.d()[t], nv)?;
        if !g.is_finite() {
            return Err(ScoreError::NonFiniteScore { t });
        }
        scores.push(g);
    }
    Ok(scores)
}

/// Combines per-fold score series into the weighted estimate with residuals.
pub(crate) fn combine(
    horizon: usize,
    per_fold: Vec<(usize, usize, Vec<f64>)>,
    diagnostics: EstimateDiagnostics,
) -> DmlEstimate {
    let total: usize = per_fold.iter().map(|(_, _, s)| s.len()).sum();
    let mut theta = 0.0;
    let mut partial = Vec::with_capacity(per_fold.len());
    for (fold, start, scores) in per_fold {
        let mean = compensated_mean(&scores);
        let weight = scores.len() as f64 / total as f64;
        theta += weight * mean;
        partial.push((fold, start, mean, weight, scores));
    }
    let folds = partial
        .into_iter()
        .map(|(fold, start, mean, weight, mut scores)| {
            scores.iter_mut().for_each(|g| *g -= theta);
            FoldEstimate { fold, start, theta: mean, weight, residuals: scores }
        })
        .collect();
    DmlEstimate { horizon, theta, folds, effective_count: total, diagnostics }
}

/// Cross-fitted DML estimate on one series under a split plan.
pub fn dml_estimate(
    sample: &HorizonSample,
    plan: &SplitPlan,
    cfg: &NuisanceConfig,
) -> Result<DmlEstimate, CrossfitError> {
    let evaluations = evaluate_folds(sample, plan, cfg, true)?;
    dml_from_evaluations(sample, plan, &evaluations)
}

/// Scores already-evaluated folds (from [`evaluate_folds`]) into the DML
/// estimate. Lets callers reuse one set of nuisance fits across estimators.
pub fn dml_from_evaluations(
    sample: &HorizonSample,
    plan: &SplitPlan,
    evaluations: &[FoldEvaluation],
) -> Result<DmlEstimate, CrossfitError> {
    let mut per_fold = Vec::with_capacity(evaluations.len());
    let mut diagnostics = EstimateDiagnostics {
        gap_below_horizon: plan.k_t() < sample.horizon(),
        ..Default::default()
    };
    for ev in evaluations {
        let scores = scores_for_fold(sample, ev)?;
        diagnostics.clip_events += ev.clip_events;
        diagnostics.train_arms.push(ev.train_arms);
        per_fold.push((ev.fold, ev.eval.start, scores));
    }
    Ok(combine(sample.horizon(), per_fold, diagnostics))
}

/// Fits and evaluates the two cross-sample folds: fold 0 evaluates `s1` with
/// nuisances fitted on `s2`, fold 1 the reverse. With `fit_propensity=false`
/// only the outcome regressions are fitted.
pub fn evaluate_two_samples(
    s1: &HorizonSample,
    s2: &HorizonSample,
    cfg: &NuisanceConfig,
    fit_propensity: bool,
) -> Result<Vec<FoldEvaluation>, CrossfitError> {
    if s1.horizon() != s2.horizon() {
        return Err(CrossfitError::HorizonMismatch(s1.horizon(), s2.horizon()));
    }
    if s1.n_confounders() != s2.n_confounders() {
        return Err(CrossfitError::WidthMismatch(s1.n_confounders(), s2.n_confounders()));
    }
    require_binary(s1)?;
    require_binary(s2)?;
    [(s1, s2), (s2, s1)]
        .iter()
        .enumerate()
        .map(|(fold, (eval_sample, train_sample))| {
            let ranges = [0..train_sample.len()];
            evaluate_fold_binary(
                train_sample,
                &ranges,
                eval_sample,
                0..eval_sample.len(),
                cfg,
                fold,
                fit_propensity,
            )
        })
        .collect()
}

/// Scores two-sample fold evaluations (from [`evaluate_two_samples`]) into
/// the combined estimate with length-proportional weights.
pub fn dml_two_samples_from_evaluations(
    s1: &HorizonSample,
    s2: &HorizonSample,
    evaluations: &[FoldEvaluation],
) -> Result<DmlEstimate, CrossfitError> {
    let mut per_fold = Vec::with_capacity(evaluations.len());
    let mut diagnostics = EstimateDiagnostics::default();
    for ev in evaluations {
        let eval_sample = if ev.fold == 0 { s1 } else { s2 };
        let scores = scores_for_fold(eval_sample, ev)?;
        diagnostics.clip_events += ev.clip_events;
        diagnostics.train_arms.push(ev.train_arms);
        per_fold.push((ev.fold, 0, scores));
    }
    Ok(combine(s1.horizon(), per_fold, diagnostics))
}

/// DML on two independent series of the same horizon: each sample is scored
/// with nuisances fitted on the other, and the two fold estimates combine
/// with weights proportional to their lengths.
pub fn dml_estimate_two_samples(
    s1: &HorizonSample,
    s2: &HorizonSample,
    cfg: &NuisanceConfig,
) -> Result<DmlEstimate, CrossfitError> {
    let evaluations = evaluate_two_samples(s1, s2, cfg, true)?;
    dml_two_samples_from_evaluations(s1, s2, &evaluations)
}

/// DML under a plan with caller-supplied nuisance values (index-aligned with
/// the sample) instead of fitted models — the oracle estimator with
/// fold-shaped bookkeeping. Values are used as given; no clipping.
pub fn dml_from_values(
    sample: &HorizonSample,
    plan: &SplitPlan,
    values: &[NuisanceEntry],
) -> Result<DmlEstimate, CrossfitError> {
    if plan.len() != sample.len() {
        return Err(CrossfitError::PlanMismatch { plan: plan.len(), sample: sample.len() });
    }
    if values.len() != sample.len() {
        return Err(CrossfitError::ValueCoverage { sample: sample.len(), values: values.len() });
    }
    let mut per_fold = Vec::with_capacity(plan.k());
    for (i, fold) in plan.folds().iter().enumerate() {
        let mut scores = Vec::with_capacity(fold.eval.len());
        for t in fold.eval.clone() {
            scores.push(dr_score(sample.y_fwd()[t], sample.d()[t], values[t])?);
        }
        per_fold.push((i, fold.eval.start, scores));
    }
    let diagnostics = EstimateDiagnostics {
        gap_below_horizon: plan.k_t() < sample.horizon(),
        ..Default::default()
    };
    Ok(combine(sample.horizon(), per_fold, diagnostics))
}

/// Two-sample analog of [`dml_from_values`].
pub fn dml_two_samples_from_values(
    s1: &HorizonSample,
    v1: &[NuisanceEntry],
    s2: &HorizonSample,
    v2: &[NuisanceEntry],
) -> Result<DmlEstimate, CrossfitError> {
    if s1.horizon() != s2.horizon() {
        return Err(CrossfitError::HorizonMismatch(s1.horizon(), s2.horizon()));
    }
    let mut per_fold = Vec::with_capacity(2);
    for (fold, (sample, values)) in [(s1, v1), (s2, v2)].iter().enumerate() {
        if values.len() != sample.len() {
            return Err(CrossfitError::ValueCoverage {
                sample: sample.len(),
                values: values.len(),
            });
        }
        let mut scores = Vec::with_capacity(sample.len());
        for t in 0..sample.len() {
            scores.push(dr_score(sample.y_fwd()[t], sample.d()[t], values[t])?);
        }
        per_fold.push((fold, 0, scores));
    }
    Ok(combine(s1.horizon(), per_fold, EstimateDiagnostics::default()))
}

/// Per-level estimates for a discrete treatment against a baseline level.
#[derive(Debug, Clone)]
pub struct MultilevelEstimate {
    pub baseline: u8,
    /// Non-baseline levels, ascending; parallel to `estimates`.
    pub levels: Vec<u8>,
    pub estimates: Vec<DmlEstimate>,
}

/// Floors each class probability at `eta` and renormalizes to a distribution
/// (the multiclass analog of binary clipping). Returns how many entries
/// moved.
fn clip_distribution(p: &mut [f64], eta: f64) -> usize {
    let mut moved = 0usize;
    let mut total = 0.0;
    for v in p.iter_mut() {
        if *v < eta {
            *v = eta;
            moved += 1;
        }
        total += *v;
    }
    p.iter_mut().for_each(|v| *v /= total);
    moved
}

/// Cross-fitted DML for a multi-level discrete treatment: one joint outcome
/// regression over treatment dummies (so every level shares one fit) and a
/// multiclass propensity, scored pairwise against the baseline level.
pub fn dml_estimate_multilevel(
    sample: &HorizonSample,
    plan: &SplitPlan,
    cfg: &MultilevelConfig,
) -> Result<MultilevelEstimate, CrossfitError> {
    if plan.len() != sample.len() {
        return Err(CrossfitError::PlanMismatch { plan: plan.len(), sample: sample.len() });
    }
    let mut codes = sample.codes().to_vec();
    codes.sort_unstable();
    if !codes.contains(&cfg.baseline) {
        return Err(CrossfitError::BadBaseline(cfg.baseline));
    }
    let levels: Vec<u8> = codes.iter().copied().filter(|&c| c != cfg.baseline).collect();
    let p = sample.n_confounders();
    let n_dummies = levels.len();
    let dummy_col = |code: u8| levels.iter().position(|&l| l == code);

    // Per fold: joint outcome fit + multiclass propensity, then per-level
    // predictions over the evaluation indices.
    let mut per_level_scores: Vec<Vec<(usize, usize, Vec<f64>)>> =
        vec![Vec::with_capacity(plan.k()); n_dummies];
    let mut diagnostics = EstimateDiagnostics {
        gap_below_horizon: plan.k_t() < sample.horizon(),
        ..Default::default()
    };

    for (i, fold) in plan.folds().iter().enumerate() {
        let (x_raw, y, d) = gather_training(sample, &fold.train, None);
        for &code in &codes {
            let count = d.iter().filter(|&&v| v == code).count();
            if count < 2 {
                return Err(CrossfitError::ArmStarvation { fold: i, arm: code, count });
            }
        }
        let rows = y.len();
        let mut x = Array2::zeros((rows, p + n_dummies));
        for r in 0..rows {
            for j in 0..p {
                x[[r, j]] = x_raw[[r, j]];
            }
            if let Some(c) = dummy_col(d[r]) {
                x[[r, p + c]] = 1.0;
            }
        }

        let fit_seed = derive_seed(cfg.seed, i as u64);
        let outcome = fit_regression(&cfg.outcome, &x, &y, derive_seed(fit_seed, 0))?;
        let prop = fit_classification(&cfg.propensity, &x_raw, &d, derive_seed(fit_seed, 2))?;
        let prop_classes = prop.classes().to_vec();
        let class_pos =
            |code: u8| prop_classes.binary_search(&code).expect("arm checked above");
        let base_pos = class_pos(cfg.baseline);

        let mut scores: Vec<Vec<f64>> =
            vec![Vec::with_capacity(fold.eval.len()); n_dummies];
        let mut xq = vec![0.0; p + n_dummies];
        let mut probs = vec![0.0; prop_classes.len()];
        for t in fold.eval.clone() {
            xq[..p].copy_from_slice(sample.x_row(t));
            xq[p..].iter_mut().for_each(|v| *v = 0.0);
            let mu_base = outcome.predict(&xq);
            prop.predict_proba_into(sample.x_row(t), &mut probs);
            diagnostics.clip_events += clip_distribution(&mut probs, cfg.eta);
            let e_base = probs[base_pos];
            for (li, &level) in levels.iter().enumerate() {
                xq[p + li] = 1.0;
                let mu_level = outcome.predict(&xq);
                xq[p + li] = 0.0;
                let g = dr_score_multilevel(
                    sample.y_fwd()[t],
                    sample.d()[t],
                    level,
                    cfg.baseline,
                    mu_level,
                    mu_base,
                    probs[class_pos(level)],
                    e_base,
                )?;
                scores[li].push(g);
            }
        }
        for (li, s) in scores.into_iter().enumerate() {
            per_level_scores[li].push((i, fold.eval.start, s));
        }
    }

    let estimates = per_level_scores
        .into_iter()
        .map(|per_fold| combine(sample.horizon(), per_fold, diagnostics.clone()))
        .collect();
    Ok(MultilevelEstimate { baseline: cfg.baseline, levels, estimates })
}
