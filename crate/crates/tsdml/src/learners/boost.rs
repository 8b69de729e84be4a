//! Gradient-boosted trees with optional early stopping on a held-out set.
//!
//! Stagewise additive modelling with a second-order (Newton) leaf step: each
//! round grows a tree on per-row gradients `g` and hessians `h`, and a leaf
//! outputs `-G/H` scaled by the learning rate. In engine terms a row enters
//! with weight `h` and target `-g/h`, which makes the split gain the usual
//! `G^2/H` improvement.
//!
//! * Regression, squared error: `g = pred - y`, `h = 1`.
//! * Binary logistic on a single score: `g = p - y`, `h = p(1-p)`.
//! * Multiclass softmax: one tree per class per round with the diagonal
//!   hessian `p_k(1 - p_k)`.
//!
//! With early stopping enabled, training aborts once the validation loss has
//! not improved for `early_stop_patience` rounds, and the returned model
//! keeps only the rounds up to the best validation loss.

use super::tree::{grow_tree, ColMatrix, GrowParams, SortedColumns, Tree};
use super::{
    sorted_unique_classes, validate_features, LearnerError, ProbabilityModel, RegressionModel,
};
use crate::numeric::{compensated_mean, derive_seed};
use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MIN_HESSIAN: f64 = 1e-16;
const PROB_CLAMP: f64 = 1e-12;

/// Booster shape, sampling, and stopping parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostSpec {
    pub learning_rate: f64,
    /// Upper bound on boosting rounds (trees per class).
    pub n_rounds: usize,
    /// Split levels below the root of each tree.
    pub max_depth: u32,
    /// Minimum hessian weight either child must keep.
    pub min_child_weight: f64,
    /// Fraction of rows drawn (without replacement) per round.
    pub subsample_rows: f64,
    /// Fraction of features available to each round's trees.
    pub subsample_features: f64,
    /// Rounds without validation improvement before training aborts;
    /// `None` disables early stopping (no validation set required).
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
}

impl Default for BoostSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            n_rounds: 500,
            max_depth: 3,
            min_child_weight: 1.0,
            subsample_rows: 1.0,
            subsample_features: 1.0,
            early_stop_patience: Some(50),
            seed: 0,
        }
    }
}

impl BoostSpec {
    fn validate(&self) -> Result<(), LearnerError> {
        if !(self.learning_rate > 0.0) {
            return Err(LearnerError::InvalidSpec(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.n_rounds == 0 {
            return Err(LearnerError::InvalidSpec("n_rounds must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(LearnerError::InvalidSpec("max_depth must be >= 1".into()));
        }
        for (name, v) in [
            ("subsample_rows", self.subsample_rows),
            ("subsample_features", self.subsample_features),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(LearnerError::InvalidSpec(format!(
                    "{name} must lie in (0,1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_matrix(x: ArrayView2<'_, f64>, n_targets: usize) -> Result<(), LearnerError> {
    let n = x.nrows();
    if n == 0 {
        return Err(LearnerError::EmptyInput);
    }
    if n < 2 {
        return Err(LearnerError::TooFewRows(n));
    }
    if n_targets != n {
        return Err(LearnerError::ShapeMismatch { x_rows: n, y_rows: n_targets });
    }
    validate_features(x)
}

/// Per-round row/feature draws, shared by the regression and classification
/// fitters so both consume randomness identically.
struct RoundSampler {
    n_rows: usize,
    features: Vec<u32>,
    row_fraction: f64,
    feature_fraction: f64,
}

impl RoundSampler {
    fn new(n_rows: usize, n_features: usize, spec: &BoostSpec) -> Self {
        Self {
            n_rows,
            features: (0..n_features as u32).collect(),
            row_fraction: spec.subsample_rows,
            feature_fraction: spec.subsample_features,
        }
    }

    /// Fills `mask` with 0/1 row indicators and returns the round's feature
    /// pool (ascending, so scan order stays deterministic).
    fn draw(&self, rng: &mut ChaCha8Rng, mask: &mut [f64]) -> Vec<u32> {
        if self.row_fraction < 1.0 {
            let k = ((self.row_fraction * self.n_rows as f64).floor() as usize).max(1);
            mask.iter_mut().for_each(|v| *v = 0.0);
            for idx in sample(rng, self.n_rows, k) {
                mask[idx] = 1.0;
            }
        } else {
            mask.iter_mut().for_each(|v| *v = 1.0);
        }
        if self.feature_fraction < 1.0 {
            let f = self.features.len();
            let k = ((self.feature_fraction * f as f64 + 1e-9).floor() as usize).clamp(1, f);
            let mut chosen: Vec<u32> =
                sample(rng, f, k).into_iter().map(|i| i as u32).collect();
            chosen.sort_unstable();
            chosen
        } else {
            self.features.clone()
        }
    }
}

/// Tracks the best validation loss and decides when to abort.
struct EarlyStop {
    patience: Option<usize>,
    best_round: usize,
    best_loss: f64,
}

impl EarlyStop {
    fn new(patience: Option<usize>) -> Self {
        Self { patience, best_round: 0, best_loss: f64::INFINITY }
    }

    /// Records round `m`'s validation loss; true means stop training.
    fn observe(&mut self, m: usize, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_round = m;
        }
        match self.patience {
            Some(p) => m - self.best_round >= p,
            None => false,
        }
    }
}

/// A fitted boosted regression ensemble.
pub struct BoostedTrees {
    base: f64,
    learning_rate: f64,
    trees: Vec<Tree>,
    n_features: usize,
    rounds_trained: usize,
    best_validation_loss: Option<f64>,
}

impl BoostedTrees {
    /// Rounds kept in the final model (the best-validation round when early
    /// stopping was active, otherwise all trained rounds).
    pub fn rounds_kept(&self) -> usize {
        self.trees.len()
    }

    /// Rounds grown before training stopped.
    pub fn rounds_trained(&self) -> usize {
        self.rounds_trained
    }

    pub fn best_validation_loss(&self) -> Option<f64> {
        self.best_validation_loss
    }
}

impl RegressionModel for BoostedTrees {
    fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_features);
        let mut acc = [0.0];
        for tree in &self.trees {
            tree.accumulate(x, self.learning_rate, &mut acc);
        }
        self.base + acc[0]
    }
}

/// Fits a squared-error boosted ensemble. `valid` supplies the held-out set
/// required whenever `spec.early_stop_patience` is set.
pub fn fit_boosted_trees(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    spec: &BoostSpec,
    valid: Option<(ArrayView2<'_, f64>, &[f64])>,
) -> Result<BoostedTrees, LearnerError> {
    spec.validate()?;
    check_matrix(x, y.len())?;
    if let Some(row) = y.iter().position(|v| !v.is_finite()) {
        return Err(LearnerError::NonFiniteTarget(row));
    }
    if spec.early_stop_patience.is_some() && valid.is_none() {
        return Err(LearnerError::MissingValidation);
    }
    if let Some((vx, vy)) = &valid {
        if vx.nrows() == 0 {
            return Err(LearnerError::MissingValidation);
        }
        if vx.nrows() != vy.len() || vx.ncols() != x.ncols() {
            return Err(LearnerError::ShapeMismatch { x_rows: vx.nrows(), y_rows: vy.len() });
        }
        validate_features(*vx)?;
    }

    let n = x.nrows();
    let p = x.ncols();
    let cols = ColMatrix::from_rows(x);
    let sorted = SortedColumns::build(&cols);
    let vcols = valid.as_ref().map(|(vx, _)| ColMatrix::from_rows(*vx));

    let base = compensated_mean(y);
    let mut pred = vec![base; n];
    let mut vpred = valid.as_ref().map(|(vx, _)| vec![base; vx.nrows()]);

    let sampler = RoundSampler::new(n, p, spec);
    let mut stopper = EarlyStop::new(spec.early_stop_patience);
    let mut mask = vec![0.0; n];
    let mut target = vec![0.0; n];
    let mut trees: Vec<Tree> = Vec::new();

    for m in 0..spec.n_rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, m as u64));
        let pool = sampler.draw(&mut rng, &mut mask);
        for i in 0..n {
            target[i] = y[i] - pred[i];
        }
        let params = GrowParams {
            max_depth: spec.max_depth,
            min_child_weight: spec.min_child_weight,
            mtry: pool.len(),
        };
        let tree = grow_tree(&cols, &sorted, &target, 1, &mask, &pool, &params, &mut rng);
        for i in 0..n {
            pred[i] += spec.learning_rate * tree.leaf_for_row(&cols, i)[0];
        }
        trees.push(tree);

        if let (Some(virtual_pred), Some(vc), Some((_, vy))) =
            (vpred.as_mut(), vcols.as_ref(), valid.as_ref())
        {
            let tree = trees.last().expect("just pushed");
            let mut loss = 0.0;
            for (i, vp) in virtual_pred.iter_mut().enumerate() {
                *vp += spec.learning_rate * tree.leaf_for_row(vc, i)[0];
                let e = *vp - vy[i];
                loss += e * e;
            }
            loss /= vy.len() as f64;
            if stopper.observe(m, loss) {
                break;
            }
        }
    }

    let rounds_trained = trees.len();
    let best_validation_loss = vpred.as_ref().map(|_| stopper.best_loss);
    if spec.early_stop_patience.is_some() {
        trees.truncate(stopper.best_round + 1);
    }
    Ok(BoostedTrees {
        base,
        learning_rate: spec.learning_rate,
        trees,
        n_features: p,
        rounds_trained,
        best_validation_loss,
    })
}

/// A fitted boosted classifier: logistic on one score for two classes,
/// softmax over per-class scores otherwise.
pub struct BoostedClassifier {
    classes: Vec<u8>,
    /// Initial score(s): one logit (binary) or per-class log-priors.
    base: Vec<f64>,
    learning_rate: f64,
    /// Binary: one tree per round. Multiclass: `n_classes` per round,
    /// round-major.
    trees: Vec<Tree>,
    n_features: usize,
    rounds_trained: usize,
    best_validation_loss: Option<f64>,
}

impl BoostedClassifier {
    pub fn rounds_kept(&self) -> usize {
        if self.classes.len() <= 2 {
            self.trees.len()
        } else {
            self.trees.len() / self.classes.len()
        }
    }

    pub fn rounds_trained(&self) -> usize {
        self.rounds_trained
    }

    /// Mean validation log-loss at the kept round, when a validation set was
    /// given.
    pub fn best_validation_loss(&self) -> Option<f64> {
        self.best_validation_loss
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|v| *v /= total);
}

impl ProbabilityModel for BoostedClassifier {
    fn classes(&self) -> &[u8] {
        &self.classes
    }

    fn predict_proba_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_features);
        let k = self.classes.len();
        debug_assert_eq!(out.len(), k);
        if k == 1 {
            out[0] = 1.0;
            return;
        }
        if k == 2 {
            let mut acc = [0.0];
            for tree in &self.trees {
                tree.accumulate(x, self.learning_rate, &mut acc);
            }
            let p1 = sigmoid(self.base[0] + acc[0]);
            out[0] = 1.0 - p1;
            out[1] = p1;
            return;
        }
        let mut scores = self.base.clone();
        for (r, tree) in self.trees.iter().enumerate() {
            let class = r % k;
            scores[class] += self.learning_rate * tree.leaf(x)[0];
        }
        softmax_into(&scores, out);
    }
}

/// Fits a boosted classifier on integer class codes.
pub fn fit_boosted_classifier(
    x: ArrayView2<'_, f64>,
    labels: &[u8],
    spec: &BoostSpec,
    valid: Option<(ArrayView2<'_, f64>, &[u8])>,
) -> Result<BoostedClassifier, LearnerError> {
    spec.validate()?;
    check_matrix(x, labels.len())?;
    if spec.early_stop_patience.is_some() && valid.is_none() {
        return Err(LearnerError::MissingValidation);
    }
    if let Some((vx, vl)) = &valid {
        if vx.nrows() == 0 {
            return Err(LearnerError::MissingValidation);
        }
        if vx.nrows() != vl.len() || vx.ncols() != x.ncols() {
            return Err(LearnerError::ShapeMismatch { x_rows: vx.nrows(), y_rows: vl.len() });
        }
        validate_features(*vx)?;
    }

    let classes = sorted_unique_classes(labels);
    let k = classes.len();
    let n = x.nrows();
    let p = x.ncols();
    let class_index = |label: u8| -> usize {
        classes.binary_search(&label).expect("label seen in training")
    };

    if k == 1 {
        // Degenerate but legal: certainty, no trees to grow.
        return Ok(BoostedClassifier {
            classes,
            base: vec![0.0],
            learning_rate: spec.learning_rate,
            trees: Vec::new(),
            n_features: p,
            rounds_trained: 0,
            best_validation_loss: None,
        });
    }

    let cols = ColMatrix::from_rows(x);
    let sorted = SortedColumns::build(&cols);
    let vcols = valid.as_ref().map(|(vx, _)| ColMatrix::from_rows(*vx));
    let v_idx: Option<Vec<usize>> = valid.as_ref().map(|(_, vl)| {
        vl.iter()
            .map(|l| classes.binary_search(l).unwrap_or(usize::MAX))
            .collect()
    });
    if let Some(idx) = &v_idx {
        if let Some(bad) = idx.iter().position(|&i| i == usize::MAX) {
            return Err(LearnerError::InvalidSpec(format!(
                "validation label at row {bad} never appears in training"
            )));
        }
    }

    let sampler = RoundSampler::new(n, p, spec);
    let mut stopper = EarlyStop::new(spec.early_stop_patience);
    let mut mask = vec![0.0; n];
    let mut trees: Vec<Tree> = Vec::new();
    let mut rounds_trained = 0usize;

    if k == 2 {
        let y: Vec<f64> = labels.iter().map(|&l| (class_index(l)) as f64).collect();
        let p_bar = compensated_mean(&y).clamp(1e-6, 1.0 - 1e-6);
        let base = (p_bar / (1.0 - p_bar)).ln();
        let mut score = vec![base; n];
        let mut vscore = vcols.as_ref().map(|vc| vec![base; vc.n_rows()]);
        let mut weight = vec![0.0; n];
        let mut target = vec![0.0; n];

        for m in 0..spec.n_rounds {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, m as u64));
            let pool = sampler.draw(&mut rng, &mut mask);
            for i in 0..n {
                let prob = sigmoid(score[i]);
                let h = (prob * (1.0 - prob)).max(MIN_HESSIAN);
                weight[i] = mask[i] * h;
                target[i] = (y[i] - prob) / h;
            }
            let params = GrowParams {
                max_depth: spec.max_depth,
                min_child_weight: spec.min_child_weight,
                mtry: pool.len(),
            };
            let tree =
                grow_tree(&cols, &sorted, &target, 1, &weight, &pool, &params, &mut rng);
            for i in 0..n {
                score[i] += spec.learning_rate * tree.leaf_for_row(&cols, i)[0];
            }
            trees.push(tree);
            rounds_trained = m + 1;

            if let (Some(vs), Some(vc), Some(idx)) =
                (vscore.as_mut(), vcols.as_ref(), v_idx.as_ref())
            {
                let tree = trees.last().expect("just pushed");
                let mut loss = 0.0;
                for (i, s) in vs.iter_mut().enumerate() {
                    *s += spec.learning_rate * tree.leaf_for_row(vc, i)[0];
                    let prob = sigmoid(*s).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    loss -= if idx[i] == 1 { prob.ln() } else { (1.0 - prob).ln() };
                }
                loss /= idx.len() as f64;
                if stopper.observe(m, loss) {
                    break;
                }
            }
        }
        if spec.early_stop_patience.is_some() {
            trees.truncate(stopper.best_round + 1);
        }
        return Ok(BoostedClassifier {
            classes,
            base: vec![base],
            learning_rate: spec.learning_rate,
            trees,
            n_features: p,
            rounds_trained,
            best_validation_loss: v_idx.as_ref().map(|_| stopper.best_loss),
        });
    }

    // Multiclass softmax: per-class scores, one tree per class per round.
    let y_idx: Vec<usize> = labels.iter().map(|&l| class_index(l)).collect();
    let mut counts = vec![0.0f64; k];
    for &c in &y_idx {
        counts[c] += 1.0;
    }
    let base: Vec<f64> = counts
        .iter()
        .map(|c| (c.max(1.0) / n as f64).ln())
        .collect();
    let mut score = vec![0.0; n * k];
    for row in score.chunks_mut(k) {
        row.copy_from_slice(&base);
    }
    let mut vscore = vcols.as_ref().map(|vc| {
        let mut s = vec![0.0; vc.n_rows() * k];
        for row in s.chunks_mut(k) {
            row.copy_from_slice(&base);
        }
        s
    });
    let mut prob_row = vec![0.0; k];
    let mut weight = vec![0.0; n];
    let mut target = vec![0.0; n];
    let mut probs = vec![0.0; n * k];

    for m in 0..spec.n_rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, m as u64));
        let pool = sampler.draw(&mut rng, &mut mask);
        for i in 0..n {
            softmax_into(&score[i * k..(i + 1) * k], &mut prob_row);
            probs[i * k..(i + 1) * k].copy_from_slice(&prob_row);
        }
        let params = GrowParams {
            max_depth: spec.max_depth,
            min_child_weight: spec.min_child_weight,
            mtry: pool.len(),
        };
        for class in 0..k {
            for i in 0..n {
                let prob = probs[i * k + class];
                let h = (prob * (1.0 - prob)).max(MIN_HESSIAN);
                let g = prob - if y_idx[i] == class { 1.0 } else { 0.0 };
                weight[i] = mask[i] * h;
                target[i] = -g / h;
            }
            let tree =
                grow_tree(&cols, &sorted, &target, 1, &weight, &pool, &params, &mut rng);
            for i in 0..n {
                score[i * k + class] += spec.learning_rate * tree.leaf_for_row(&cols, i)[0];
            }
            trees.push(tree);
        }
        rounds_trained = m + 1;

        if let (Some(vs), Some(vc), Some(idx)) =
            (vscore.as_mut(), vcols.as_ref(), v_idx.as_ref())
        {
            let round_trees = &trees[m * k..(m + 1) * k];
            let mut loss = 0.0;
            for i in 0..idx.len() {
                for (class, tree) in round_trees.iter().enumerate() {
                    vs[i * k + class] +=
                        spec.learning_rate * tree.leaf_for_row(vc, i)[0];
                }
                softmax_into(&vs[i * k..(i + 1) * k], &mut prob_row);
                loss -= prob_row[idx[i]].clamp(PROB_CLAMP, 1.0).ln();
            }
            loss /= idx.len() as f64;
            if stopper.observe(m, loss) {
                break;
            }
        }
    }
    if spec.early_stop_patience.is_some() {
        trees.truncate((stopper.best_round + 1) * k);
    }
    Ok(BoostedClassifier {
        classes,
        base,
        learning_rate: spec.learning_rate,
        trees,
        n_features: p,
        rounds_trained,
        best_validation_loss: v_idx.as_ref().map(|_| stopper.best_loss),
    })
}
