//! Monte Carlo study harness: draw panels, run every selected estimator per
//! horizon, and aggregate bias / spread / coverage across replications.
//!
//! A study runs in two phases. An optional tuning phase picks learner
//! hyperparameters per (horizon, nuisance role) from a grid, scored on
//! independent draw pairs — fit on the first draw, validated on the second —
//! with forests choosing the most frequent per-draw winner and boosting
//! choosing by mean validation loss, then its learning rate by per-draw
//! winner and its round count as the mean early-stopped round. The
//! replication phase then draws `N` fresh panels and runs the selected
//! methods (cross-fitted DML plus the comparison estimators) on each, with
//! the DML and cross-fitted regression-adjustment estimators sharing one set
//! of nuisance fits per replication. Estimation rows carry the confounders
//! plus `outcome_lags` lagged outcomes: the outcome is autoregressive, so
//! its own pre-treatment lags are confounders the learners should see.
//!
//! Seeding is fully deterministic and parallelism-independent: every
//! replication derives its own seed from `(study seed, T index, replication
//! index)`, and aggregation keeps replication order.

use crate::baselines::{
    local_projection, regression_adjustment, regression_adjustment_from_evaluations,
    regression_adjustment_two_samples_from_evaluations, BaselineError,
};
use crate::crossfit::{
    dml_from_evaluations, dml_two_samples_from_evaluations, evaluate_folds,
    evaluate_two_samples, make_split_plan, GapSide, ModelSpec, NuisanceConfig,
};
use crate::dgp::{gen_panel, true_irf_with_draws, DgpConfig, DgpError, TrueIrf};
use crate::learners::{
    fit_boosted_classifier, fit_boosted_trees, fit_forest_classification, fit_forest_regression,
    mode_vote, BoostSpec, ForestSpec, ProbabilityModel, RegressionModel,
};
use crate::numeric::{compensated_mean, derive_seed};
use crate::panel::{build_horizon_sample, HorizonSample, Panel};
use crate::variance::{estimate_with_inference, BandwidthRule, ConfidenceInterval, IrfEstimate};
use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum McError {
    #[error("invalid study configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dgp(#[from] DgpError),
    #[error("tuning failed: {0}")]
    Tuning(String),
}

/// How the data reach the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// One series per replication; cross-fitting splits it symmetrically
    /// with the dependence gap shared between training and evaluation.
    OneSample,
    /// Two independent series per replication (each half the budget), each
    /// scored with nuisances fitted on the other.
    TwoSample,
}

/// Estimators the study can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dml,
    CrossFitRa,
    InSampleRa,
    Lp,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Dml => "DML",
            Method::CrossFitRa => "RA^c",
            Method::InSampleRa => "RA",
            Method::Lp => "LP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerFamily {
    Forest,
    Boosting,
}

/// Hyperparameter search space and draw budget for the tuning phase.
#[derive(Debug, Clone)]
pub struct TuningProtocol {
    /// Independent draw pairs scored per candidate.
    pub draws: usize,
    pub forest_depths: Vec<u32>,
    pub forest_min_leaves: Vec<usize>,
    /// First boosting stage: tree depth candidates.
    pub boost_interactions: Vec<u32>,
    pub boost_child_weights: Vec<f64>,
    /// Row and feature subsampling shares (crossed with each other).
    pub boost_subsamples: Vec<f64>,
    /// Second boosting stage: learning-rate candidates.
    pub boost_rates: Vec<f64>,
    pub boost_max_rounds: usize,
    pub boost_patience: usize,
}

impl TuningProtocol {
    /// The full published search space (expensive).
    pub fn paper() -> Self {
        Self {
            draws: 10,
            forest_depths: vec![10, 20, 50],
            forest_min_leaves: vec![1, 5, 10],
            boost_interactions: (1..=10).collect(),
            boost_child_weights: (1..=10).map(f64::from).collect(),
            boost_subsamples: vec![0.25, 0.5, 0.75, 1.0],
            boost_rates: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5],
            boost_max_rounds: 10_000,
            boost_patience: 50,
        }
    }

    /// A reduced space for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            draws: 3,
            forest_depths: vec![10, 50],
            forest_min_leaves: vec![1, 10],
            boost_interactions: vec![1, 3],
            boost_child_weights: vec![1.0],
            boost_subsamples: vec![1.0],
            boost_rates: vec![0.05, 0.1],
            boost_max_rounds: 200,
            boost_patience: 20,
        }
    }
}

/// Full specification of one Monte Carlo study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub scenario: Scenario,
    /// Process parameters; the `t` and `seed` fields are overridden per
    /// replication.
    pub dgp: DgpConfig,
    pub horizons: Vec<usize>,
    pub t_list: Vec<usize>,
    /// Replications per series length.
    pub replications: usize,
    /// Cross-fitting folds.
    pub k: usize,
    /// Dependence gap.
    pub k_t: usize,
    pub family: LearnerFamily,
    /// Trees per forest (the desk default trades tail accuracy for speed;
    /// published-scale runs use 500).
    pub forest_trees: usize,
    pub methods: Vec<Method>,
    /// Interval levels, as alpha values.
    pub alphas: Vec<f64>,
    pub seed: u64,
    /// Advisory worker count for the caller's thread pool; the study itself
    /// is deterministic at any parallelism.
    pub threads: usize,
    /// Run the tuning phase with this protocol; `None` uses family defaults.
    pub tuning: Option<TuningProtocol>,
    /// Draws behind the true-effect oracle.
    pub oracle_draws: usize,
    /// Lagged copies of the outcome appended to the confounder rows before
    /// estimation (the first `outcome_lags` rows are dropped). The outcome
    /// carries an autoregressive term, so its own lag is a confounder the
    /// learners should see: past outcomes are pre-treatment information, and
    /// conditioning on them shrinks the residual the inverse-propensity terms
    /// must absorb. Zero estimates from the raw confounders alone.
    pub outcome_lags: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::OneSample,
            dgp: DgpConfig::default(),
            horizons: vec![0],
            t_list: vec![1000],
            replications: 10,
            k: 2,
            k_t: 20,
            family: LearnerFamily::Forest,
            forest_trees: 100,
            methods: vec![Method::Dml, Method::CrossFitRa],
            alphas: vec![0.05],
            seed: 0,
            threads: 0,
            tuning: None,
            oracle_draws: 2_000_000,
            outcome_lags: 1,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), McError> {
        self.dgp.validate()?;
        if self.replications == 0 {
            return Err(McError::Invalid("need at least one replication".into()));
        }
        for (name, empty) in [
            ("horizons", self.horizons.is_empty()),
            ("t_list", self.t_list.is_empty()),
            ("methods", self.methods.is_empty()),
            ("alphas", self.alphas.is_empty()),
        ] {
            if empty {
                return Err(McError::Invalid(format!("{name} must be non-empty")));
            }
        }
        if self.k < 2 {
            return Err(McError::Invalid(format!("need at least 2 folds, got {}", self.k)));
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(McError::Invalid(format!("alpha {a} outside (0,1)")));
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(McError::Invalid(format!("method {m} listed twice")));
            }
        }
        if self.scenario == Scenario::TwoSample {
            if let Some(&t) = self.t_list.iter().find(|&&t| t < 8) {
                return Err(McError::Invalid(format!(
                    "two-sample scenario needs t >= 8 to split, got {t}"
                )));
            }
        }
        let shortest = self.t_list.iter().copied().min().unwrap_or(0);
        if self.outcome_lags + 8 > shortest / if self.scenario == Scenario::TwoSample { 2 } else { 1 } {
            return Err(McError::Invalid(format!(
                "outcome_lags = {} leaves too few rows at T = {shortest}",
                self.outcome_lags
            )));
        }
        Ok(())
    }
}

/// Appends `lags` lagged copies of the outcome to each confounder row and
/// drops the first `lags` rows, so row `t` carries `(x_t, y_{t-1}, ...,
/// y_{t-lags})`. Lagged outcomes are pre-treatment information under the
/// sampling design (treatment at `t` depends on `x_t` alone), so they are
/// legitimate extra confounders for every estimator in the study.
fn append_outcome_lags(panel: &Panel, lags: usize) -> Result<Panel, McError> {
    if lags == 0 {
        return Ok(panel.clone());
    }
    if panel.len() <= lags + 1 {
        return Err(McError::Invalid(format!(
            "cannot take {lags} outcome lags from {} rows",
            panel.len()
        )));
    }
    let y = panel.y();
    let rows: Vec<Vec<f64>> = (lags..panel.len())
        .map(|t| {
            let mut row = panel.x_row(t).to_vec();
            row.extend((1..=lags).map(|l| y[t - l]));
            row
        })
        .collect();
    Panel::new(
        y[lags..].to_vec(),
        panel.d()[lags..].to_vec(),
        rows,
        panel.codes().to_vec(),
    )
    .map_err(|e| McError::Invalid(e.to_string()))
}

/// One estimator's output on one replication at one horizon.
#[derive(Debug, Clone)]
pub struct RawEstimate {
    pub method: Method,
    pub t: usize,
    pub h: usize,
    pub rep: usize,
    pub theta: f64,
    pub std_error: f64,
    pub intervals: Vec<ConfidenceInterval>,
}

/// A replication that could not produce an estimate for one method.
#[derive(Debug, Clone)]
pub struct Failure {
    pub method: Method,
    pub t: usize,
    pub rep: usize,
    pub message: String,
}

/// Aggregated metrics for one (method, horizon, length) cell.
#[derive(Debug, Clone)]
pub struct CellMetrics {
    pub method: Method,
    pub h: usize,
    pub t: usize,
    pub truth: f64,
    /// |mean estimate - truth|.
    pub bias: f64,
    /// Population standard deviation across replications.
    pub std: f64,
    /// Root mean squared error against the truth.
    pub rmse: f64,
    /// (alpha, fraction of intervals containing the truth).
    pub coverage: Vec<(f64, f64)>,
    /// Replications contributing (failures excluded).
    pub replications: usize,
}

/// Everything a study produces.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub truth: TrueIrf,
    pub cells: Vec<CellMetrics>,
    /// Per-replication estimates, ordered by (T, replication, method, h).
    pub raw: Vec<RawEstimate>,
    pub failures: Vec<Failure>,
    /// Tuned per-horizon learner configurations, when tuning ran.
    pub tuned: Option<Vec<(usize, NuisanceConfig)>>,
}

impl StudyResult {
    pub fn cell(&self, method: Method, h: usize, t: usize) -> Option<&CellMetrics> {
        self.cells.iter().find(|c| c.method == method && c.h == h && c.t == t)
    }

    /// Log-log bias slope across the T grid for the main estimator at one
    /// horizon.
    pub fn dml_bias_scaling(&self, h: usize) -> ScalingReport {
        let biases: Vec<(usize, f64)> = self
            .cells
            .iter()
            .filter(|c| c.method == Method::Dml && c.h == h)
            .map(|c| (c.t, c.bias))
            .collect();
        sqrt_t_bias_check(&biases)
    }
}

/// Bias, population standard deviation, and RMSE of estimates against one
/// truth. The three satisfy `rmse^2 = bias^2 + std^2` up to accumulation
/// error.
pub fn metrics(estimates: &[f64], truth: f64) -> (f64, f64, f64) {
    assert!(!estimates.is_empty(), "metrics need at least one estimate");
    let n = estimates.len() as f64;
    let mean = compensated_mean(estimates);
    let bias = (mean - truth).abs();
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / n;
    (bias, var.sqrt(), mse.sqrt())
}

/// Fraction of intervals containing the truth.
pub fn coverage(intervals: &[(f64, f64)], truth: f64) -> f64 {
    if intervals.is_empty() {
        return f64::NAN;
    }
    let hits = intervals.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count();
    hits as f64 / intervals.len() as f64
}

/// One (T, |bias|) point of the scaling fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub t: usize,
    pub bias: f64,
    /// True when the point could not enter the log-log fit (zero or
    /// non-finite bias).
    pub excluded: bool,
}

/// Log-log fit of |bias| against T, for checking the root-T decay of the
/// estimator's bias.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// OLS slope of log|bias| on log T over included points (needs two or
    /// more distinct T).
    pub slope: Option<f64>,
    /// |slope - (-1/2)|.
    pub gap_from_root_t: Option<f64>,
}

/// Fits log|bias| against log T. Zero or non-finite biases are excluded and
/// flagged rather than failing the fit.
pub fn sqrt_t_bias_check(biases: &[(usize, f64)]) -> ScalingReport {
    let points: Vec<ScalingPoint> = biases
        .iter()
        .map(|&(t, bias)| ScalingPoint { t, bias, excluded: !(bias.is_finite() && bias > 0.0) })
        .collect();
    let included: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| !p.excluded)
        .map(|p| ((p.t as f64).ln(), p.bias.ln()))
        .collect();
    let slope = if included.len() >= 2 {
        let n = included.len() as f64;
        let mx = included.iter().map(|(x, _)| x).sum::<f64>() / n;
        let my = included.iter().map(|(_, y)| y).sum::<f64>() / n;
        let sxx: f64 = included.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
        let sxy: f64 = included.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    } else {
        None
    };
    ScalingReport { points, slope, gap_from_root_t: slope.map(|s| (s + 0.5).abs()) }
}

/// Seed substreams of the study seed.
const TIER_TUNING: u64 = 1;
const TIER_REPLICATION_BASE: u64 = 1000;
/// Substreams of one replication seed.
const REP_STREAM_PANEL_A: u64 = 0;
const REP_STREAM_PANEL_B: u64 = 1;
const REP_STREAM_ESTIMATOR: u64 = 7;

fn default_nuisance(cfg: &StudyConfig) -> NuisanceConfig {
    match cfg.family {
        LearnerFamily::Forest => NuisanceConfig {
            mu1: ModelSpec::Forest(ForestSpec {
                n_trees: cfg.forest_trees,
                ..ForestSpec::regression()
            }),
            mu0: ModelSpec::Forest(ForestSpec {
                n_trees: cfg.forest_trees,
                ..ForestSpec::regression()
            }),
            e: ModelSpec::Forest(ForestSpec {
                n_trees: cfg.forest_trees,
                ..ForestSpec::classification()
            }),
            ..NuisanceConfig::default()
        },
        LearnerFamily::Boosting => NuisanceConfig {
            mu1: ModelSpec::Boost(BoostSpec::default()),
            mu0: ModelSpec::Boost(BoostSpec::default()),
            e: ModelSpec::Boost(BoostSpec::default()),
            ..NuisanceConfig::default()
        },
    }
}

/// The three nuisance roles a tuned configuration covers.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    TreatedOutcome,
    ControlOutcome,
    Propensity,
}

/// Training/validation rows for one role on one draw pair.
struct RoleData {
    train_x: Array2<f64>,
    train_y: Vec<f64>,
    train_labels: Vec<u8>,
    valid_x: Array2<f64>,
    valid_y: Vec<f64>,
    valid_labels: Vec<u8>,
}

fn rows_matrix(sample: &HorizonSample, keep: impl Fn(u8) -> bool) -> (Array2<f64>, Vec<f64>, Vec<u8>) {
    let p = sample.n_confounders();
    let mut flat = Vec::new();
    let mut y = Vec::new();
    let mut labels = Vec::new();
    for t in 0..sample.len() {
        if keep(sample.d()[t]) {
            flat.extend_from_slice(sample.x_row(t));
            y.push(sample.y_fwd()[t]);
            labels.push(sample.d()[t]);
        }
    }
    let rows = y.len();
    (Array2::from_shape_vec((rows, p), flat).expect("row-major"), y, labels)
}

fn role_data(train: &HorizonSample, valid: &HorizonSample, role: Role) -> RoleData {
    let keep: Box<dyn Fn(u8) -> bool> = match role {
        Role::TreatedOutcome => Box::new(|d| d == 1),
        Role::ControlOutcome => Box::new(|d| d == 0),
        Role::Propensity => Box::new(|_| true),
    };
    let (train_x, train_y, train_labels) = rows_matrix(train, &keep);
    let (valid_x, valid_y, valid_labels) = rows_matrix(valid, &keep);
    RoleData { train_x, train_y, train_labels, valid_x, valid_y, valid_labels }
}

fn regression_mse(model: &dyn RegressionModel, data: &RoleData) -> f64 {
    let n = data.valid_y.len();
    let mut acc = 0.0;
    for i in 0..n {
        let row = data.valid_x.row(i);
        let err = model.predict(row.as_slice().expect("contiguous")) - data.valid_y[i];
        acc += err * err;
    }
    acc / n as f64
}

fn classification_logloss(model: &dyn ProbabilityModel, data: &RoleData) -> f64 {
    let n = data.valid_labels.len();
    let mut acc = 0.0;
    for i in 0..n {
        let row = data.valid_x.row(i);
        let p = model
            .prob_of(row.as_slice().expect("contiguous"), data.valid_labels[i])
            .max(1e-12);
        acc -= p.ln();
    }
    acc / n as f64
}

fn tune_forest_role(
    datasets: &[RoleData],
    role: Role,
    proto: &TuningProtocol,
    trees: usize,
    stream: u64,
) -> Result<ForestSpec, McError> {
    let base = match role {
        Role::Propensity => ForestSpec::classification(),
        _ => ForestSpec::regression(),
    };
    let grid: Vec<ForestSpec> = proto
        .forest_depths
        .iter()
        .flat_map(|&d| {
            let base = base.clone();
            proto.forest_min_leaves.iter().map(move |&l| ForestSpec {
                n_trees: trees,
                max_depth: d,
                min_leaf: l,
                ..base.clone()
            })
        })
        .collect();
    if grid.is_empty() {
        return Err(McError::Tuning("empty forest grid".into()));
    }
    let mut winners = Vec::with_capacity(datasets.len());
    let mut mean_loss = vec![0.0; grid.len()];
    for (r, data) in datasets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, spec) in grid.iter().enumerate() {
            let seed = derive_seed(stream, (r * grid.len() + g) as u64);
            let spec = ForestSpec { seed, ..spec.clone() };
            let loss = if role == Role::Propensity {
                let model =
                    fit_forest_classification(data.train_x.view(), &data.train_labels, &spec)
                        .map_err(|e| McError::Tuning(e.to_string()))?;
                classification_logloss(&model, data)
            } else {
                let model = fit_forest_regression(data.train_x.view(), &data.train_y, &spec)
                    .map_err(|e| McError::Tuning(e.to_string()))?;
                regression_mse(&model, data)
            };
            mean_loss[g] += loss / datasets.len() as f64;
            if best.map_or(true, |(_, b)| loss < b) {
                best = Some((g, loss));
            }
        }
        winners.push(best.expect("non-empty grid").0);
    }
    let idx = mode_vote(&winners, &mean_loss).expect("non-empty winners");
    Ok(ForestSpec { seed: 0, ..grid[idx].clone() })
}

fn tune_boost_role(
    datasets: &[RoleData],
    role: Role,
    proto: &TuningProtocol,
    stream: u64,
) -> Result<BoostSpec, McError> {
    // Stage one: structure under a fixed moderate learning rate, scored by
    // mean validation loss at the early-stopped round.
    let mut structures = Vec::new();
    for &depth in &proto.boost_interactions {
        for &w in &proto.boost_child_weights {
            for &so in &proto.boost_subsamples {
                for &sf in &proto.boost_subsamples {
                    structures.push(BoostSpec {
                        learning_rate: 0.1,
                        n_rounds: proto.boost_max_rounds,
                        max_depth: depth,
                        min_child_weight: w,
                        subsample_rows: so,
                        subsample_features: sf,
                        early_stop_patience: Some(proto.boost_patience),
                        seed: 0,
                    });
                }
            }
        }
    }
    if structures.is_empty() {
        return Err(McError::Tuning("empty boosting grid".into()));
    }
    let fit_loss_rounds = |spec: &BoostSpec, data: &RoleData| -> Result<(f64, usize), McError> {
        if role == Role::Propensity {
            let model = fit_boosted_classifier(
                data.train_x.view(),
                &data.train_labels,
                spec,
                Some((data.valid_x.view(), &data.valid_labels)),
            )
            .map_err(|e| McError::Tuning(e.to_string()))?;
            Ok((model.best_validation_loss().expect("validation given"), model.rounds_kept()))
        } else {
            let model = fit_boosted_trees(
                data.train_x.view(),
                &data.train_y,
                spec,
                Some((data.valid_x.view(), &data.valid_y)),
            )
            .map_err(|e| McError::Tuning(e.to_string()))?;
            Ok((model.best_validation_loss().expect("validation given"), model.rounds_kept()))
        }
    };
    let mut stage1_loss = vec![0.0; structures.len()];
    for (r, data) in datasets.iter().enumerate() {
        for (g, spec) in structures.iter().enumerate() {
            let seed = derive_seed(stream, (r * structures.len() + g) as u64);
            let (loss, _) = fit_loss_rounds(&BoostSpec { seed, ..spec.clone() }, data)?;
            stage1_loss[g] += loss / datasets.len() as f64;
        }
    }
    let winner = stage1_loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty grid")
        .0;
    let structure = structures[winner].clone();

    // Stage two: learning rate by most frequent per-draw winner; rounds as
    // the mean early-stopped round of that rate, rounded.
    let rate_stream = derive_seed(stream, u64::MAX);
    let mut rate_winners = Vec::with_capacity(datasets.len());
    let mut rate_mean_loss = vec![0.0; proto.boost_rates.len()];
    let mut rate_rounds = vec![Vec::new(); proto.boost_rates.len()];
    for (r, data) in datasets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, &lr) in proto.boost_rates.iter().enumerate() {
            let seed = derive_seed(rate_stream, (r * proto.boost_rates.len() + g) as u64);
            let spec = BoostSpec { learning_rate: lr, seed, ..structure.clone() };
            let (loss, rounds) = fit_loss_rounds(&spec, data)?;
            rate_mean_loss[g] += loss / datasets.len() as f64;
            rate_rounds[g].push(rounds as f64);
            if best.map_or(true, |(_, b)| loss < b) {
                best = Some((g, loss));
            }
        }
        rate_winners.push(best.expect("non-empty rates").0);
    }
    let rate_idx = mode_vote(&rate_winners, &rate_mean_loss).expect("non-empty winners");
    let rounds = compensated_mean(&rate_rounds[rate_idx]).round().max(1.0) as usize;
    Ok(BoostSpec {
        learning_rate: proto.boost_rates[rate_idx],
        n_rounds: rounds,
        early_stop_patience: None,
        seed: 0,
        ..structure
    })
}

/// Runs the tuning phase: per horizon, per nuisance role, pick a learner
/// specification from the protocol's grid using independent draw pairs at
/// the largest configured series length.
pub fn tune_study_nuisances(
    cfg: &StudyConfig,
) -> Result<Vec<(usize, NuisanceConfig)>, McError> {
    let proto = cfg
        .tuning
        .as_ref()
        .ok_or_else(|| McError::Invalid("no tuning protocol configured".into()))?;
    if proto.draws == 0 {
        return Err(McError::Invalid("tuning needs at least one draw".into()));
    }
    let t_tune = *cfg.t_list.iter().max().expect("validated non-empty");
    let stream = derive_seed(cfg.seed, TIER_TUNING);
    let mut pairs: Vec<(Panel, Panel)> = Vec::with_capacity(proto.draws);
    for r in 0..proto.draws {
        let d1 = DgpConfig {
            t: t_tune,
            seed: derive_seed(stream, 2 * r as u64),
            ..cfg.dgp.clone()
        };
        let d2 = DgpConfig {
            t: t_tune,
            seed: derive_seed(stream, 2 * r as u64 + 1),
            ..cfg.dgp.clone()
        };
        pairs.push((
            append_outcome_lags(&gen_panel(&d1)?, cfg.outcome_lags)?,
            append_outcome_lags(&gen_panel(&d2)?, cfg.outcome_lags)?,
        ));
    }

    let mut tuned = Vec::with_capacity(cfg.horizons.len());
    for (hi, &h) in cfg.horizons.iter().enumerate() {
        let samples: Vec<(HorizonSample, HorizonSample)> = pairs
            .iter()
            .map(|(a, b)| {
                Ok((
                    build_horizon_sample(a, h).map_err(|e| McError::Tuning(e.to_string()))?,
                    build_horizon_sample(b, h).map_err(|e| McError::Tuning(e.to_string()))?,
                ))
            })
            .collect::<Result<_, McError>>()?;
        let mut specs = Vec::with_capacity(3);
        for (ri, role) in
            [Role::TreatedOutcome, Role::ControlOutcome, Role::Propensity].into_iter().enumerate()
        {
            let datasets: Vec<RoleData> =
                samples.iter().map(|(a, b)| role_data(a, b, role)).collect();
            let role_stream = derive_seed(stream, 1_000 + (hi * 3 + ri) as u64);
            let spec = match cfg.family {
                LearnerFamily::Forest => ModelSpec::Forest(tune_forest_role(
                    &datasets,
                    role,
                    proto,
                    cfg.forest_trees,
                    role_stream,
                )?),
                LearnerFamily::Boosting => {
                    ModelSpec::Boost(tune_boost_role(&datasets, role, proto, role_stream)?)
                }
            };
            specs.push(spec);
        }
        let e = specs.pop().expect("three roles");
        let mu0 = specs.pop().expect("three roles");
        let mu1 = specs.pop().expect("three roles");
        tuned.push((h, NuisanceConfig { mu1, mu0, e, ..NuisanceConfig::default() }));
    }
    Ok(tuned)
}

/// One estimator's per-horizon outputs on one replication.
type MethodOutcome = Result<Vec<(usize, IrfEstimate)>, String>;

fn irf_of_baseline(r: crate::baselines::BaselineResult) -> IrfEstimate {
    r.estimate
}

fn run_replication(
    cfg: &StudyConfig,
    tuned: Option<&[(usize, NuisanceConfig)]>,
    t: usize,
    rep_seed: u64,
) -> Vec<(Method, MethodOutcome)> {
    let est_seed = derive_seed(rep_seed, REP_STREAM_ESTIMATOR);
    let nuisance_for = |h: usize| -> NuisanceConfig {
        let base = tuned
            .and_then(|list| list.iter().find(|(th, _)| *th == h).map(|(_, c)| c.clone()))
            .unwrap_or_else(|| default_nuisance(cfg));
        NuisanceConfig { seed: est_seed, ..base }
    };
    let wants = |m: Method| cfg.methods.contains(&m);
    let mut out: Vec<(Method, MethodOutcome)> = Vec::new();
    let fail_all = |msg: String| -> Vec<(Method, MethodOutcome)> {
        cfg.methods.iter().map(|&m| (m, Err(msg.clone()))).collect()
    };

    // Draw the replication's data.
    let (samples_a, samples_b): (Vec<HorizonSample>, Option<Vec<HorizonSample>>) =
        match cfg.scenario {
            Scenario::OneSample => {
                let dgp = DgpConfig {
                    t,
                    seed: derive_seed(rep_seed, REP_STREAM_PANEL_A),
                    ..cfg.dgp.clone()
                };
                let panel = match gen_panel(&dgp)
                    .map_err(|e| e.to_string())
                    .and_then(|p| append_outcome_lags(&p, cfg.outcome_lags).map_err(|e| e.to_string()))
                {
                    Ok(p) => p,
                    Err(e) => return fail_all(e),
                };
                let samples = match cfg
                    .horizons
                    .iter()
                    .map(|&h| build_horizon_sample(&panel, h))
                    .collect::<Result<Vec<_>, _>>()
                {
                    Ok(s) => s,
                    Err(e) => return fail_all(e.to_string()),
                };
                (samples, None)
            }
            Scenario::TwoSample => {
                let half = t / 2;
                let d1 = DgpConfig {
                    t: half,
                    seed: derive_seed(rep_seed, REP_STREAM_PANEL_A),
                    ..cfg.dgp.clone()
                };
                let d2 = DgpConfig {
                    t: t - half,
                    seed: derive_seed(rep_seed, REP_STREAM_PANEL_B),
                    ..cfg.dgp.clone()
                };
                let gen = |d: &DgpConfig| {
                    gen_panel(d).map_err(|e| e.to_string()).and_then(|p| {
                        append_outcome_lags(&p, cfg.outcome_lags).map_err(|e| e.to_string())
                    })
                };
                let (p1, p2) = match (gen(&d1), gen(&d2)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => return fail_all(e),
                };
                let build = |p: &Panel| {
                    cfg.horizons
                        .iter()
                        .map(|&h| build_horizon_sample(p, h))
                        .collect::<Result<Vec<_>, _>>()
                };
                match (build(&p1), build(&p2)) {
                    (Ok(a), Ok(b)) => (a, Some(b)),
                    (Err(e), _) | (_, Err(e)) => return fail_all(e.to_string()),
                }
            }
        };

    // DML and cross-fitted regression adjustment share nuisance fits.
    if wants(Method::Dml) || wants(Method::CrossFitRa) {
        let shared = || -> Result<(Vec<(usize, IrfEstimate)>, Vec<(usize, IrfEstimate)>), String> {
            let mut dml = Vec::new();
            let mut rac = Vec::new();
            for (hi, &h) in cfg.horizons.iter().enumerate() {
                let ncfg = nuisance_for(h);
                let sample = &samples_a[hi];
                match &samples_b {
                    None => {
                        let plan =
                            make_split_plan(sample.len(), cfg.k, cfg.k_t, GapSide::Both)
                                .map_err(|e| e.to_string())?;
                        let evals =
                            evaluate_folds(sample, &plan, &ncfg, wants(Method::Dml))
                                .map_err(|e| e.to_string())?;
                        if wants(Method::Dml) {
                            let est = dml_from_evaluations(sample, &plan, &evals)
                                .map_err(|e| e.to_string())?;
                            let irf =
                                estimate_with_inference(&est, BandwidthRule::Auto, &cfg.alphas)
                                    .map_err(|e| e.to_string())?;
                            dml.push((h, irf));
                        }
                        if wants(Method::CrossFitRa) {
                            let res = regression_adjustment_from_evaluations(
                                sample,
                                &plan,
                                &evals,
                                BandwidthRule::Auto,
                                &cfg.alphas,
                            )
                            .map_err(|e| e.to_string())?;
                            rac.push((h, irf_of_baseline(res)));
                        }
                    }
                    Some(b) => {
                        let s2 = &b[hi];
                        let evals =
                            evaluate_two_samples(sample, s2, &ncfg, wants(Method::Dml))
                                .map_err(|e| e.to_string())?;
                        if wants(Method::Dml) {
                            let est = dml_two_samples_from_evaluations(sample, s2, &evals)
                                .map_err(|e| e.to_string())?;
                            let irf =
                                estimate_with_inference(&est, BandwidthRule::Auto, &cfg.alphas)
                                    .map_err(|e| e.to_string())?;
                            dml.push((h, irf));
                        }
                        if wants(Method::CrossFitRa) {
                            let res = regression_adjustment_two_samples_from_evaluations(
                                h,
                                &evals,
                                BandwidthRule::Auto,
                                &cfg.alphas,
                            )
                            .map_err(|e| e.to_string())?;
                            rac.push((h, irf_of_baseline(res)));
                        }
                    }
                }
            }
            Ok((dml, rac))
        };
        match shared() {
            Ok((dml, rac)) => {
                if wants(Method::Dml) {
                    out.push((Method::Dml, Ok(dml)));
                }
                if wants(Method::CrossFitRa) {
                    out.push((Method::CrossFitRa, Ok(rac)));
                }
            }
            Err(msg) => {
                if wants(Method::Dml) {
                    out.push((Method::Dml, Err(msg.clone())));
                }
                if wants(Method::CrossFitRa) {
                    out.push((Method::CrossFitRa, Err(msg)));
                }
            }
        }
    }

    // Pooled rows for the in-sample comparison methods.
    let pooled = |hi: usize| -> Result<HorizonSample, String> {
        match &samples_b {
            None => Ok(samples_a[hi].clone()),
            Some(b) => samples_a[hi].concat(&b[hi]).map_err(|e| e.to_string()),
        }
    };
    if wants(Method::InSampleRa) {
        let run = || -> Result<Vec<(usize, IrfEstimate)>, String> {
            cfg.horizons
                .iter()
                .enumerate()
                .map(|(hi, &h)| {
                    let sample = pooled(hi)?;
                    let res = regression_adjustment(
                        &sample,
                        None,
                        &nuisance_for(h),
                        BandwidthRule::Auto,
                        &cfg.alphas,
                    )
                    .map_err(|e: BaselineError| e.to_string())?;
                    Ok((h, irf_of_baseline(res)))
                })
                .collect()
        };
        out.push((Method::InSampleRa, run()));
    }
    if wants(Method::Lp) {
        let run = || -> Result<Vec<(usize, IrfEstimate)>, String> {
            cfg.horizons
                .iter()
                .enumerate()
                .map(|(hi, &h)| {
                    let sample = pooled(hi)?;
                    let res = local_projection(&sample, BandwidthRule::Auto, &cfg.alphas)
                        .map_err(|e| e.to_string())?;
                    Ok((h, irf_of_baseline(res)))
                })
                .collect()
        };
        out.push((Method::Lp, run()));
    }
    out
}

/// Runs the full study: the true-effect oracle, the optional tuning phase,
/// then all replications across the T grid, aggregated into per-cell
/// metrics. Deterministic in the configuration, independent of thread count.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult, McError> {
    cfg.validate()?;
    let truth = true_irf_with_draws(&cfg.dgp, &cfg.horizons, cfg.oracle_draws)?;
    let tuned = match cfg.tuning {
        Some(_) => Some(tune_study_nuisances(cfg)?),
        None => None,
    };

    let mut raw: Vec<RawEstimate> = Vec::new();
    let mut failures: Vec<Failure> = Vec::new();
    for (ti, &t) in cfg.t_list.iter().enumerate() {
        let tier = derive_seed(cfg.seed, TIER_REPLICATION_BASE + ti as u64);
        let outcomes: Vec<Vec<(Method, MethodOutcome)>> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| run_replication(cfg, tuned.as_deref(), t, derive_seed(tier, rep as u64)))
            .collect();
        for (rep, methods) in outcomes.into_iter().enumerate() {
            for (method, outcome) in methods {
                match outcome {
                    Ok(horizons) => {
                        for (h, irf) in horizons {
                            raw.push(RawEstimate {
                                method,
                                t,
                                h,
                                rep,
                                theta: irf.theta,
                                std_error: irf.std_error,
                                intervals: irf.intervals,
                            });
                        }
                    }
                    Err(message) => failures.push(Failure { method, t, rep, message }),
                }
            }
        }
    }

    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &h in &cfg.horizons {
            for &t in &cfg.t_list {
                let truth_h = truth.value(h).expect("oracle covers every horizon");
                let rows: Vec<&RawEstimate> = raw
                    .iter()
                    .filter(|r| r.method == method && r.h == h && r.t == t)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let thetas: Vec<f64> = rows.iter().map(|r| r.theta).collect();
                let (bias, std, rmse) = metrics(&thetas, truth_h);
                let cov = cfg
                    .alphas
                    .iter()
                    .map(|&alpha| {
                        let ivs: Vec<(f64, f64)> = rows
                            .iter()
                            .filter_map(|r| {
                                r.intervals
                                    .iter()
                                    .find(|ci| ci.alpha == alpha)
                                    .map(|ci| (ci.lo, ci.hi))
                            })
                            .collect();
                        (alpha, coverage(&ivs, truth_h))
                    })
                    .collect();
                cells.push(CellMetrics {
                    method,
                    h,
                    t,
                    truth: truth_h,
                    bias,
                    std,
                    rmse,
                    coverage: cov,
                    replications: rows.len(),
                });
            }
        }
    }
    Ok(StudyResult { truth, cells, raw, failures, tuned })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn metric_hand_values() {
        let (bias, std, rmse) = metrics(&[1.0, 3.0], 2.0);
        assert_eq!((bias, std, rmse), (0.0, 1.0, 1.0));
        let (bias, std, rmse) = metrics(&[2.0, 2.0], 1.0);
        assert_eq!((bias, std, rmse), (1.0, 0.0, 1.0));
        let (bias, std, rmse) = metrics(&[0.0, 4.0], 1.0);
        assert_relative_eq!(bias, 1.0);
        assert_relative_eq!(std, 2.0);
        assert_relative_eq!(rmse, 5.0f64.sqrt(), max_relative = 1e-15);
        // rmse^2 = bias^2 + std^2 up to accumulation error.
        assert!((rmse * rmse - bias * bias - std * std).abs() <= 1e-10 * rmse * rmse);
    }

    #[test]
    fn coverage_counts_containing_intervals() {
        let everything = vec![(f64::NEG_INFINITY, f64::INFINITY); 3];
        assert_eq!(coverage(&everything, 123.0), 1.0);
        assert_eq!(coverage(&[(0.0, 1.0), (1.5, 3.0)], 2.0), 0.5);
        assert_eq!(coverage(&[(0.0, 1.0)], 2.0), 0.0);
    }

    #[test]
    fn scaling_fit_recovers_exact_slopes() {
        let exact: Vec<(usize, f64)> =
            [1000usize, 4000, 16000].iter().map(|&t| (t, 3.0 / (t as f64).sqrt())).collect();
        let report = sqrt_t_bias_check(&exact);
        assert_relative_eq!(report.slope.unwrap(), -0.5, epsilon = 1e-12);
        assert!(report.gap_from_root_t.unwrap() < 1e-12);

        let constant = [(1000usize, 0.25), (4000, 0.25), (16000, 0.25)];
        let report = sqrt_t_bias_check(&constant);
        assert_relative_eq!(report.slope.unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn outcome_lags_append_shifted_columns() {
        let y = vec![10.0, 11.0, 12.0, 13.0];
        let d = vec![0u8, 1, 0, 1];
        let x: Vec<Vec<f64>> = (0..4).map(|t| vec![t as f64]).collect();
        let panel = Panel::new(y, d, x, vec![0, 1]).unwrap();
        let aug = append_outcome_lags(&panel, 1).unwrap();
        assert_eq!(aug.len(), 3);
        assert_eq!(aug.n_confounders(), 2);
        assert_eq!(aug.x_row(0), &[1.0, 10.0]);
        assert_eq!(aug.x_row(2), &[3.0, 12.0]);
        assert_eq!(aug.y(), &[11.0, 12.0, 13.0]);
        assert_eq!(aug.d(), &[1, 0, 1]);
        assert_eq!(append_outcome_lags(&panel, 0).unwrap(), panel);
        assert!(append_outcome_lags(&panel, 3).is_err());
    }

    #[test]
    fn zero_bias_points_are_excluded_not_fatal() {
        let report =
            sqrt_t_bias_check(&[(1000, 0.0), (4000, 0.2), (16000, 0.1)]);
        assert!(report.points[0].excluded);
        assert!(report.slope.is_some());
        let single = sqrt_t_bias_check(&[(1000, 0.0), (4000, 0.2)]);
        assert!(single.slope.is_none());
    }

    fn smoke_config() -> StudyConfig {
        StudyConfig {
            t_list: vec![300],
            replications: 2,
            k_t: 4,
            horizons: vec![0, 1],
            forest_trees: 5,
            methods: vec![Method::Dml, Method::CrossFitRa, Method::InSampleRa, Method::Lp],
            alphas: vec![0.05, 0.01],
            oracle_draws: 200_000,
            ..StudyConfig::default()
        }
    }

    #[test]
    fn study_produces_a_cell_per_method_and_horizon() {
        let cfg = smoke_config();
        let result = run_study(&cfg).unwrap();
        assert!(result.failures.is_empty(), "{:?}", result.failures);
        for &m in &cfg.methods {
            for &h in &cfg.horizons {
                let cell = result.cell(m, h, 300).unwrap_or_else(|| panic!("missing {m} h={h}"));
                assert_eq!(cell.replications, 2);
                assert!(cell.bias.is_finite() && cell.rmse >= cell.bias);
                for &(_, c) in &cell.coverage {
                    assert!((0.0..=1.0).contains(&c));
                }
                // Nested intervals: the 1% interval covers at least as often.
                let c95 = cell.coverage.iter().find(|(a, _)| *a == 0.05).unwrap().1;
                let c99 = cell.coverage.iter().find(|(a, _)| *a == 0.01).unwrap().1;
                assert!(c99 >= c95);
            }
        }
        assert_eq!(result.raw.len(), 4 * 2 * 2);
    }

    #[test]
    fn studies_are_reproducible() {
        let cfg = smoke_config();
        let a = run_study(&cfg).unwrap();
        let b = run_study(&cfg).unwrap();
        assert_eq!(a.raw.len(), b.raw.len());
        for (ra, rb) in a.raw.iter().zip(&b.raw) {
            assert_eq!(ra.theta.to_bits(), rb.theta.to_bits());
        }
    }

    #[test]
    fn single_replication_metrics_degenerate_cleanly() {
        let cfg = StudyConfig {
            replications: 1,
            methods: vec![Method::Lp],
            horizons: vec![0],
            t_list: vec![300],
            oracle_draws: 200_000,
            ..StudyConfig::default()
        };
        let result = run_study(&cfg).unwrap();
        let cell = result.cell(Method::Lp, 0, 300).unwrap();
        assert_eq!(cell.std, 0.0);
        let raw = &result.raw[0];
        assert_relative_eq!(cell.bias, (raw.theta - cell.truth).abs());
    }

    #[test]
    fn infeasible_plans_fail_only_the_cross_fitted_methods() {
        let cfg = StudyConfig {
            k_t: 200,
            t_list: vec![100],
            replications: 2,
            methods: vec![Method::Dml, Method::CrossFitRa, Method::Lp],
            horizons: vec![0],
            oracle_draws: 200_000,
            ..StudyConfig::default()
        };
        let result = run_study(&cfg).unwrap();
        assert!(result.cell(Method::Dml, 0, 100).is_none());
        assert!(result.cell(Method::CrossFitRa, 0, 100).is_none());
        assert!(result.cell(Method::Lp, 0, 100).is_some());
        assert_eq!(result.failures.len(), 4);
        assert!(result.failures.iter().all(|f| f.message.contains("degenerate split")));
    }

    #[test]
    fn two_sample_studies_run_every_method() {
        let cfg = StudyConfig {
            scenario: Scenario::TwoSample,
            t_list: vec![400],
            replications: 2,
            horizons: vec![0],
            forest_trees: 5,
            methods: vec![Method::Dml, Method::CrossFitRa, Method::InSampleRa, Method::Lp],
            oracle_draws: 200_000,
            ..StudyConfig::default()
        };
        let result = run_study(&cfg).unwrap();
        assert!(result.failures.is_empty(), "{:?}", result.failures);
        for &m in &cfg.methods {
            assert!(result.cell(m, 0, 400).is_some(), "missing {m}");
        }
    }

    #[test]
    fn forest_tuning_picks_from_the_grid_deterministically() {
        let cfg = StudyConfig {
            t_list: vec![300],
            horizons: vec![0],
            forest_trees: 5,
            tuning: Some(TuningProtocol {
                draws: 2,
                forest_depths: vec![2, 10],
                forest_min_leaves: vec![1],
                ..TuningProtocol::desk()
            }),
            oracle_draws: 200_000,
            ..StudyConfig::default()
        };
        let a = tune_study_nuisances(&cfg).unwrap();
        let b = tune_study_nuisances(&cfg).unwrap();
        assert_eq!(a.len(), 1);
        let (h, ncfg) = &a[0];
        assert_eq!(*h, 0);
        match &ncfg.mu1 {
            ModelSpec::Forest(spec) => {
                assert!([2, 10].contains(&spec.max_depth));
                assert_eq!(spec.n_trees, 5);
            }
            other => panic!("expected forest, got {other:?}"),
        }
        match (&a[0].1.e, &b[0].1.e) {
            (ModelSpec::Forest(sa), ModelSpec::Forest(sb)) => {
                assert_eq!(sa.max_depth, sb.max_depth);
                assert_eq!(sa.min_leaf, sb.min_leaf);
            }
            _ => panic!("expected forests"),
        }
    }

    #[test]
    fn boost_tuning_freezes_rounds_and_rate() {
        let cfg = StudyConfig {
            t_list: vec![240],
            horizons: vec![0],
            family: LearnerFamily::Boosting,
            tuning: Some(TuningProtocol {
                draws: 2,
                boost_interactions: vec![1, 2],
                boost_child_weights: vec![1.0],
                boost_subsamples: vec![1.0],
                boost_rates: vec![0.1, 0.3],
                boost_max_rounds: 20,
                boost_patience: 5,
                ..TuningProtocol::desk()
            }),
            oracle_draws: 200_000,
            ..StudyConfig::default()
        };
        let tuned = tune_study_nuisances(&cfg).unwrap();
        match &tuned[0].1.mu0 {
            ModelSpec::Boost(spec) => {
                assert!(spec.early_stop_patience.is_none());
                assert!(spec.n_rounds >= 1 && spec.n_rounds <= 20);
                assert!([0.1, 0.3].contains(&spec.learning_rate));
            }
            other => panic!("expected boosting, got {other:?}"),
        }
    }

    /// Not a correctness test: a small pilot of the desk study printing the
    /// cell metrics, for sanity-checking learner defaults before long runs.
    /// Run with `--ignored --nocapture`.
    #[test]
    #[ignore]
    fn desk_pilot_probe() {
        use std::time::Instant;
        let cfg = StudyConfig {
            t_list: vec![4000],
            replications: 50,
            horizons: vec![0, 1, 3, 5],
            forest_trees: 100,
            methods: vec![Method::Dml, Method::CrossFitRa],
            alphas: vec![0.05, 0.01],
            oracle_draws: 2_000_000,
            ..StudyConfig::default()
        };
        let start = Instant::now();
        let result = run_study(&cfg).unwrap();
        println!("pilot ran in {:.2?}, truth(0) = {:.4}", start.elapsed(), result.truth.values[0]);
        for cell in &result.cells {
            let ses: Vec<f64> = result
                .raw
                .iter()
                .filter(|r| r.method == cell.method && r.h == cell.h && r.t == cell.t)
                .map(|r| r.std_error)
                .collect();
            let mean_se = compensated_mean(&ses);
            let min_se = ses.iter().cloned().fold(f64::INFINITY, f64::min);
            println!(
                "{} h={} T={}: bias {:.4} std {:.4} rmse {:.4} C95 {:.3} C99 {:.3} se mean {:.4} min {:.4} ({} reps)",
                cell.method, cell.h, cell.t, cell.bias, cell.std, cell.rmse,
                cell.coverage[0].1, cell.coverage[1].1, mean_se, min_se, cell.replications
            );
        }
    }

    /// Not a correctness test: times one desk-scale replication so study
    /// budgets can be planned. Run with `--ignored --nocapture`.
    #[test]
    #[ignore]
    fn desk_replication_timing_probe() {
        use std::time::Instant;
        let cfg = StudyConfig {
            t_list: vec![4000],
            replications: 1,
            horizons: vec![0, 1, 3, 5],
            forest_trees: 100,
            methods: vec![Method::Dml, Method::CrossFitRa],
            oracle_draws: 200_000,
            ..StudyConfig::default()
        };
        let start = Instant::now();
        let result = run_study(&cfg).unwrap();
        println!(
            "one T=4000 replication over 4 horizons: {:.2?} ({} failures)",
            start.elapsed(),
            result.failures.len()
        );
    }

    /// Not a correctness test: decomposes the cross-fitted score variance
    /// into outcome-model and propensity-model contributions by swapping in
    /// the closed-form nuisances one side at a time, across candidate forest
    /// settings. Run with `--ignored --nocapture`.
    #[test]
    #[ignore]
    fn nuisance_quality_probe() {
        use crate::dgp::oracle_nuisances;
        use crate::learners::MaxFeatures;
        use crate::score::{dr_score, NuisanceEntry};

        let t = 4000usize;
        let trees = 100usize;
        let panels: Vec<(Panel, HorizonSample, Vec<NuisanceEntry>)> = (0..2u64)
            .map(|i| {
                let dgp = DgpConfig { t, seed: derive_seed(424_242, i), ..DgpConfig::default() };
                let panel = append_outcome_lags(&gen_panel(&dgp).unwrap(), 1).unwrap();
                let sample = build_horizon_sample(&panel, 0).unwrap();
                let oracle = oracle_nuisances(&sample, dgp.gamma);
                (panel, sample, oracle)
            })
            .collect();

        let variance = |v: &[f64]| {
            let m = compensated_mean(v);
            v.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (v.len() - 1) as f64
        };

        let with = |mu: ForestSpec, e: ForestSpec| NuisanceConfig {
            mu1: ModelSpec::Forest(mu.clone()),
            mu0: ModelSpec::Forest(mu),
            e: ModelSpec::Forest(e),
            ..NuisanceConfig::default()
        };
        let mu_base = ForestSpec { n_trees: trees, ..ForestSpec::regression() };
        let e_base = ForestSpec { n_trees: trees, ..ForestSpec::classification() };
        let _ = MaxFeatures::All; // candidate axis kept visible for future probes
        let configs: Vec<(&str, NuisanceConfig)> =
            vec![("defaults", with(mu_base.clone(), e_base.clone()))];

        for (label, ncfg) in &configs {
            let mut fitted = Vec::new();
            let mut with_true_e = Vec::new();
            let mut with_true_mu = Vec::new();
            let mut oracle_scores = Vec::new();
            let mut e_sq_err = 0.0f64;
            let mut cate_sq_err = 0.0f64;
            let mut clip = 0usize;
            let mut n_eval = 0usize;
            let mut e_min = f64::INFINITY;
            let mut e_max = f64::NEG_INFINITY;
            for (_, sample, oracle) in &panels {
                let plan = make_split_plan(sample.len(), 2, 20, GapSide::Both).unwrap();
                let evals = evaluate_folds(sample, &plan, ncfg, true).unwrap();
                for ev in &evals {
                    // Serial-dependence diagnostics of this fold's score series.
                    let fold_scores: Vec<f64> = ev
                        .eval
                        .clone()
                        .enumerate()
                        .map(|(i, idx)| {
                            let nv =
                                NuisanceEntry { mu1: ev.mu1[i], mu0: ev.mu0[i], e: ev.e[i] };
                            dr_score(sample.y_fwd()[idx], sample.d()[idx], nv).unwrap()
                        })
                        .collect();
                    let m_auto = crate::variance::auto_bandwidth(&fold_scores).unwrap();
                    let centered: Vec<f64> = {
                        let mean = compensated_mean(&fold_scores);
                        fold_scores.iter().map(|s| s - mean).collect()
                    };
                    let hac_auto =
                        crate::variance::newey_west_fold(&centered, m_auto).unwrap();
                    let hac_long =
                        crate::variance::newey_west_fold(&centered, 120).unwrap();
                    let var0 = crate::variance::newey_west_fold(&centered, 0).unwrap();
                    let rho: Vec<f64> = (1..=6)
                        .map(|lag| {
                            let cov: f64 = centered[lag..]
                                .iter()
                                .zip(&centered)
                                .map(|(a, b)| a * b)
                                .sum();
                            cov / centered.len() as f64 / var0
                        })
                        .collect();
                    println!(
                        "  fold {}: var {:.2} | NW auto m={} -> {:.2} | NW m=120 -> {:.2} | rho1..6 {:?}",
                        ev.fold,
                        var0,
                        m_auto,
                        hac_auto,
                        hac_long,
                        rho.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>(),
                    );
                    clip += ev.clip_events;
                    for (i, idx) in ev.eval.clone().enumerate() {
                        let y = sample.y_fwd()[idx];
                        let d = sample.d()[idx];
                        let fit = NuisanceEntry { mu1: ev.mu1[i], mu0: ev.mu0[i], e: ev.e[i] };
                        let orc = oracle[idx];
                        fitted.push(dr_score(y, d, fit).unwrap());
                        with_true_e
                            .push(dr_score(y, d, NuisanceEntry { e: orc.e, ..fit }).unwrap());
                        with_true_mu
                            .push(dr_score(y, d, NuisanceEntry { e: fit.e, ..orc }).unwrap());
                        oracle_scores.push(dr_score(y, d, orc).unwrap());
                        e_sq_err += (fit.e - orc.e) * (fit.e - orc.e);
                        let cate = fit.mu1 - fit.mu0 - (orc.mu1 - orc.mu0);
                        cate_sq_err += cate * cate;
                        e_min = e_min.min(fit.e);
                        e_max = e_max.max(fit.e);
                        n_eval += 1;
                    }
                }
            }
            println!("--- {label} ---");
            println!(
                "  score var: fitted {:>6.2} | true-e {:>6.2} | true-mu {:>6.2} | oracle {:>6.2}",
                variance(&fitted),
                variance(&with_true_e),
                variance(&with_true_mu),
                variance(&oracle_scores),
            );
            println!(
                "  theta: fitted {:.4} true-e {:.4} true-mu {:.4} oracle {:.4} | e rmse {:.4} range [{:.4},{:.4}] clip {}/{} | cate rmse {:.4}",
                compensated_mean(&fitted),
                compensated_mean(&with_true_e),
                compensated_mean(&with_true_mu),
                compensated_mean(&oracle_scores),
                (e_sq_err / n_eval as f64).sqrt(),
                e_min,
                e_max,
                clip,
                n_eval,
                (cate_sq_err / n_eval as f64).sqrt(),
            );
        }
    }

    /// Not a correctness test: measures how much of the outcome's
    /// autoregressive carry-over E[Y_{t-1} | X_t] a forest can recover from
    /// the contemporaneous confounders alone, which bounds how far the
    /// outcome models can shrink the doubly robust residual.
    /// Run with `--ignored --nocapture`.
    #[test]
    #[ignore]
    fn lag_predictability_probe() {
        use crate::learners::fit_forest_regression;

        let t = 16000usize;
        let dgp = DgpConfig { t, seed: 909, ..DgpConfig::default() };
        let panel = gen_panel(&dgp).unwrap();
        let half = t / 2;
        let p = panel.n_confounders();

        // rows: X_t features; targets: Y_{t-1} and Y_t.
        let build = |range: std::ops::Range<usize>| {
            let rows = range.len();
            let mut flat = Vec::with_capacity(rows * p);
            let mut y_lag = Vec::with_capacity(rows);
            let mut y_now = Vec::with_capacity(rows);
            for i in range {
                flat.extend_from_slice(panel.x_row(i));
                y_lag.push(panel.y()[i - 1]);
                y_now.push(panel.y()[i]);
            }
            (Array2::from_shape_vec((rows, p), flat).unwrap(), y_lag, y_now)
        };
        let (train_x, train_lag, train_now) = build(1..half);
        let (test_x, test_lag, test_now) = build(half + 20..t);

        let var = |v: &[f64]| {
            let m = compensated_mean(v);
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let spec = ForestSpec { n_trees: 200, min_leaf: 20, ..ForestSpec::regression() };
        for (name, tr_y, te_y) in
            [("Y_{t-1}", &train_lag, &test_lag), ("Y_t", &train_now, &test_now)]
        {
            let model = fit_forest_regression(train_x.view(), tr_y, &spec).unwrap();
            let mse = test_x
                .rows()
                .into_iter()
                .zip(te_y)
                .map(|(row, &y)| {
                    let err = model.predict(row.as_slice().unwrap()) - y;
                    err * err
                })
                .sum::<f64>()
                / te_y.len() as f64;
            let v = var(te_y);
            println!("{name} ~ X_t: var {v:.3} oos-mse {mse:.3} R2 {:.3}", 1.0 - mse / v);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = StudyConfig { replications: 0, ..StudyConfig::default() };
        assert!(bad.validate().is_err());
        let dup = StudyConfig {
            methods: vec![Method::Dml, Method::Dml],
            ..StudyConfig::default()
        };
        assert!(dup.validate().is_err());
        let alpha = StudyConfig { alphas: vec![1.5], ..StudyConfig::default() };
        assert!(alpha.validate().is_err());
    }
}
