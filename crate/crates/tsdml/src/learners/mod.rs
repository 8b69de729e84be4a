//! Nonparametric nuisance learners: random forests (regression and
//! classification), gradient-boosted trees with optional early stopping, and
//! grid tuning over gap-blocked cross-validation splits.
//!
//! All learners are deterministic functions of (data, spec, seed): refitting
//! with the same inputs reproduces every prediction bit for bit, regardless
//! of thread count. Fitted models are immutable and safe to share across
//! threads.

mod boost;
mod cv;
mod forest;
mod tree;
mod tune;

pub use boost::{fit_boosted_classifier, fit_boosted_trees, BoostSpec, BoostedClassifier, BoostedTrees};
pub use cv::{blocked_cv_splits, CvSplit};
pub use forest::{fit_forest_classification, fit_forest_regression, ForestClassifier, ForestRegressor, ForestSpec};
pub use tune::{mode_vote, tune_boost, tune_forest, GridScore, TuneData, TuneOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("training data is empty")]
    EmptyInput,
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("non-finite target at row {0}")]
    NonFiniteTarget(usize),
    #[error("shape mismatch: {x_rows} feature rows vs {y_rows} targets")]
    ShapeMismatch { x_rows: usize, y_rows: usize },
    #[error("invalid learner spec: {0}")]
    InvalidSpec(String),
    #[error("early stopping requires a validation set")]
    MissingValidation,
    #[error("invalid cross-validation layout: {0}")]
    InvalidCv(String),
    #[error("tuning grid is empty")]
    EmptyGrid,
    #[error("tuning has no splits to evaluate on")]
    NoSplits,
    #[error("every spec in the grid failed to fit")]
    AllSpecsFailed,
}

/// How many candidate features a node may consider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxFeatures {
    All,
    Sqrt,
    /// One third of the columns — the customary regression-forest default.
    Third,
    Log2,
    Count(usize),
}

impl MaxFeatures {
    /// Concrete per-split feature count for `n_features` columns.
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            Self::All => n_features,
            Self::Sqrt => ((n_features as f64).sqrt().floor() as usize).clamp(1, n_features),
            Self::Third => (n_features / 3).clamp(1, n_features),
            Self::Log2 => ((n_features as f64).log2().floor() as usize).clamp(1, n_features),
            Self::Count(c) => c,
        }
    }
}

/// A fitted model that maps a feature row to a real-valued prediction.
pub trait RegressionModel: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

/// A fitted model that maps a feature row to a distribution over the class
/// codes it was trained on.
pub trait ProbabilityModel: Send + Sync {
    /// Class codes in prediction order.
    fn classes(&self) -> &[u8];

    /// Writes one probability per class into `out` (length = classes).
    fn predict_proba_into(&self, x: &[f64], out: &mut [f64]);

    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes().len()];
        self.predict_proba_into(x, &mut out);
        out
    }

    /// Probability of one class; 0 for codes the model never saw.
    fn prob_of(&self, x: &[f64], code: u8) -> f64 {
        match self.classes().iter().position(|&c| c == code) {
            Some(i) => self.predict_proba(x)[i],
            None => 0.0,
        }
    }
}

pub(crate) fn validate_features(x: ndarray::ArrayView2<'_, f64>) -> Result<(), LearnerError> {
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(LearnerError::NonFiniteFeature { row, col });
        }
    }
    Ok(())
}

pub(crate) fn sorted_unique_classes(labels: &[u8]) -> Vec<u8> {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
}
