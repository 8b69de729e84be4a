//! Random forests: bagged CART trees with per-node feature subsampling.
//!
//! Regression predicts the across-tree average of leaf means; classification
//! trains one tree ensemble on one-hot targets, so leaf values are per-class
//! frequencies and the averaged prediction is a proper distribution (the
//! one-hot sum-of-squares split criterion is the Gini improvement).

use super::tree::{grow_tree, ColMatrix, GrowParams, SortedColumns, Tree};
use super::{
    sorted_unique_classes, validate_features, LearnerError, MaxFeatures, ProbabilityModel,
    RegressionModel,
};
use crate::numeric::{compensated_mean, derive_seed};
use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Forest shape and sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestSpec {
    pub n_trees: usize,
    /// Split levels below the root.
    pub max_depth: u32,
    /// Minimum bootstrap-weighted observations per leaf.
    pub min_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl ForestSpec {
    /// Regression default: 500 deep trees, a third of the features per
    /// split, five observations per leaf (the customary regression-forest
    /// defaults).
    pub fn regression() -> Self {
        Self {
            n_trees: 500,
            max_depth: 50,
            min_leaf: 5,
            max_features: MaxFeatures::Third,
            bootstrap: true,
            seed: 0,
        }
    }

    /// Classification default: sqrt-of-p features per split and wide leaves.
    /// The forest is used for probability estimation, where small leaves
    /// produce jumpy class frequencies whose reciprocals destabilize any
    /// downstream inverse-propensity weighting; overly wide leaves shrink
    /// the probabilities toward the base rate instead, so the floor stays
    /// moderate.
    pub fn classification() -> Self {
        Self {
            max_features: MaxFeatures::Sqrt,
            min_leaf: 20,
            ..Self::regression()
        }
    }

    fn validate(&self, n_features: usize) -> Result<(), LearnerError> {
        if self.n_trees == 0 {
            return Err(LearnerError::InvalidSpec("n_trees must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(LearnerError::InvalidSpec("max_depth must be >= 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(LearnerError::InvalidSpec("min_leaf must be >= 1".into()));
        }
        if let MaxFeatures::Count(c) = self.max_features {
            if c == 0 || c > n_features {
                return Err(LearnerError::InvalidSpec(format!(
                    "max_features count {c} outside [1, {n_features}]"
                )));
            }
        }
        Ok(())
    }
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self::regression()
    }
}

fn grow_forest(
    x: &ColMatrix,
    y: &[f64],
    n_out: usize,
    spec: &ForestSpec,
) -> Vec<Tree> {
    let n = x.n_rows();
    let sorted = SortedColumns::build(x);
    let features: Vec<u32> = (0..x.n_cols() as u32).collect();
    let params = GrowParams {
        max_depth: spec.max_depth,
        min_child_weight: spec.min_leaf as f64,
        mtry: spec.max_features.resolve(x.n_cols()),
    };
    (0..spec.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
            let mut weight = vec![0.0; n];
            if spec.bootstrap {
                for _ in 0..n {
                    weight[rng.gen_range(0..n)] += 1.0;
                }
            } else {
                weight.iter_mut().for_each(|w| *w = 1.0);
            }
            grow_tree(x, &sorted, y, n_out, &weight, &features, &params, &mut rng)
        })
        .collect()
}

/// A fitted regression forest.
pub struct ForestRegressor {
    trees: Vec<Tree>,
    /// Training-target mean; trees are grown on centered targets.
    offset: f64,
    n_features: usize,
}

impl ForestRegressor {
    pub fn n_features(&self) -> usize {
        self.n_features
    }
}

impl RegressionModel for ForestRegressor {
    fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_features);
        let mut acc = [0.0];
        let scale = 1.0 / self.trees.len() as f64;
        for tree in &self.trees {
            tree.accumulate(x, scale, &mut acc);
        }
        acc[0] + self.offset
    }
}

/// Fits a regression forest on `x` (rows = observations) against `y`.
pub fn fit_forest_regression(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    spec: &ForestSpec,
) -> Result<ForestRegressor, LearnerError> {
    let (n, p) = x.dim();
    if n == 0 {
        return Err(LearnerError::EmptyInput);
    }
    if n < 2 {
        return Err(LearnerError::TooFewRows(n));
    }
    if y.len() != n {
        return Err(LearnerError::ShapeMismatch { x_rows: n, y_rows: y.len() });
    }
    spec.validate(p)?;
    validate_features(x)?;
    if let Some(row) = y.iter().position(|v| !v.is_finite()) {
        return Err(LearnerError::NonFiniteTarget(row));
    }

    let offset = compensated_mean(y);
    let centered: Vec<f64> = y.iter().map(|v| v - offset).collect();
    let cols = ColMatrix::from_rows(x);
    let trees = grow_forest(&cols, &centered, 1, spec);
    Ok(ForestRegressor { trees, offset, n_features: p })
}

/// A fitted classification forest; predictions are per-class frequencies
/// averaged over trees.
pub struct ForestClassifier {
    trees: Vec<Tree>,
    classes: Vec<u8>,
    /// Training class frequencies; trees are grown on centered one-hots.
    priors: Vec<f64>,
    n_features: usize,
}

impl ForestClassifier {
    pub fn n_features(&self) -> usize {
        self.n_features
    }
}

impl ProbabilityModel for ForestClassifier {
    fn classes(&self) -> &[u8] {
        &self.classes
    }

    fn predict_proba_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_features);
        let k = self.classes.len();
        debug_assert_eq!(out.len(), k);
        out.iter_mut().for_each(|v| *v = 0.0);
        let scale = 1.0 / self.trees.len() as f64;
        for tree in &self.trees {
            tree.accumulate(x, scale, out);
        }
        // Undo the centering, then tidy rounding residue so the result is an
        // exact distribution.
        let mut total = 0.0;
        for (v, p) in out.iter_mut().zip(&self.priors) {
            *v = (*v + p).clamp(0.0, 1.0);
            total += *v;
        }
        if total > 0.0 {
            out.iter_mut().for_each(|v| *v /= total);
        } else {
            out.iter_mut().for_each(|v| *v = 1.0 / k as f64);
        }
    }
}

/// Fits a classification forest on integer class codes.
pub fn fit_forest_classification(
    x: ArrayView2<'_, f64>,
    labels: &[u8],
    spec: &ForestSpec,
) -> Result<ForestClassifier, LearnerError> {
    let (n, p) = x.dim();
    if n == 0 {
        return Err(LearnerError::EmptyInput);
    }
    if n < 2 {
        return Err(LearnerError::TooFewRows(n));
    }
    if labels.len() != n {
        return Err(LearnerError::ShapeMismatch { x_rows: n, y_rows: labels.len() });
    }
    spec.validate(p)?;
    validate_features(x)?;

    let classes = sorted_unique_classes(labels);
    let k = classes.len();
    let mut priors = vec![0.0; k];
    let mut onehot = vec![0.0; n * k];
    for (r, label) in labels.iter().enumerate() {
        let c = classes.binary_search(label).expect("class from labels");
        onehot[r * k + c] = 1.0;
        priors[c] += 1.0;
    }
    priors.iter_mut().for_each(|p| *p /= n as f64);
    for r in 0..n {
        for c in 0..k {
            onehot[r * k + c] -= priors[c];
        }
    }

    let cols = ColMatrix::from_rows(x);
    let trees = grow_forest(&cols, &onehot, k, spec);
    Ok(ForestClassifier { trees, classes, priors, n_features: p })
}
