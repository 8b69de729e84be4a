//! Grid search over blocked splits.
//!
//! Every spec in the grid is fitted on each split's training indices and
//! scored on its validation block — mean squared error for regression,
//! log-loss for classification — then ranked by the mean validation score.
//! Ties keep the first spec in grid order; specs that fail to fit anywhere
//! are excluded.

use super::cv::CvSplit;
use super::{
    fit_boosted_classifier, fit_boosted_trees, fit_forest_classification,
    fit_forest_regression, BoostSpec, ForestSpec, LearnerError, ProbabilityModel,
    RegressionModel,
};
use ndarray::{Array2, ArrayView2};

/// The data being tuned on, with targets matching the task.
pub enum TuneData<'a> {
    Regression { x: ArrayView2<'a, f64>, y: &'a [f64] },
    Classification { x: ArrayView2<'a, f64>, labels: &'a [u8] },
}

impl TuneData<'_> {
    fn x(&self) -> ArrayView2<'_, f64> {
        match self {
            Self::Regression { x, .. } => x.view(),
            Self::Classification { x, .. } => x.view(),
        }
    }
}

/// One grid entry's mean validation score; `None` marks a failed fit.
#[derive(Debug, Clone)]
pub struct GridScore<S> {
    pub spec: S,
    pub score: Option<f64>,
}

/// Result of a grid search: the winning spec and the full score table.
#[derive(Debug, Clone)]
pub struct TuneOutcome<S> {
    pub best_index: usize,
    pub best: S,
    pub scores: Vec<GridScore<S>>,
}

fn gather_x(x: &ArrayView2<'_, f64>, rows: impl Iterator<Item = usize>) -> Array2<f64> {
    let idx: Vec<usize> = rows.collect();
    let p = x.ncols();
    Array2::from_shape_fn((idx.len(), p), |(r, j)| x[[idx[r], j]])
}

fn gather<T: Copy>(values: &[T], rows: impl Iterator<Item = usize>) -> Vec<T> {
    rows.map(|i| values[i]).collect()
}

fn fill_row(x: &ArrayView2<'_, f64>, i: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(x.row(i).iter().copied());
}

fn mse_on_valid(
    model: &dyn RegressionModel,
    x: &ArrayView2<'_, f64>,
    y: &[f64],
    valid: std::ops::Range<usize>,
) -> f64 {
    let mut buf = Vec::with_capacity(x.ncols());
    let mut acc = 0.0;
    let n = valid.len();
    for i in valid {
        fill_row(x, i, &mut buf);
        let e = model.predict(&buf) - y[i];
        acc += e * e;
    }
    acc / n as f64
}

fn logloss_on_valid(
    model: &dyn ProbabilityModel,
    x: &ArrayView2<'_, f64>,
    labels: &[u8],
    valid: std::ops::Range<usize>,
) -> f64 {
    let mut buf = Vec::with_capacity(x.ncols());
    let mut acc = 0.0;
    let n = valid.len();
    for i in valid {
        fill_row(x, i, &mut buf);
        let p = model.prob_of(&buf, labels[i]).clamp(1e-12, 1.0);
        acc -= p.ln();
    }
    acc / n as f64
}

fn eval_forest(data: &TuneData<'_>, spec: &ForestSpec, split: &CvSplit) -> Result<f64, LearnerError> {
    let x = data.x();
    let train_x = gather_x(&x, split.train_indices());
    match data {
        TuneData::Regression { y, .. } => {
            let train_y = gather(y, split.train_indices());
            let model = fit_forest_regression(train_x.view(), &train_y, spec)?;
            Ok(mse_on_valid(&model, &x, y, split.valid.clone()))
        }
        TuneData::Classification { labels, .. } => {
            let train_l = gather(labels, split.train_indices());
            let model = fit_forest_classification(train_x.view(), &train_l, spec)?;
            Ok(logloss_on_valid(&model, &x, labels, split.valid.clone()))
        }
    }
}

fn eval_boost(data: &TuneData<'_>, spec: &BoostSpec, split: &CvSplit) -> Result<f64, LearnerError> {
    let x = data.x();
    let train_x = gather_x(&x, split.train_indices());
    let valid_x = gather_x(&x, split.valid.clone());
    match data {
        TuneData::Regression { y, .. } => {
            let train_y = gather(y, split.train_indices());
            let valid_y = gather(y, split.valid.clone());
            let model = fit_boosted_trees(
                train_x.view(),
                &train_y,
                spec,
                Some((valid_x.view(), &valid_y)),
            )?;
            Ok(mse_on_valid(&model, &x, y, split.valid.clone()))
        }
        TuneData::Classification { labels, .. } => {
            let train_l = gather(labels, split.train_indices());
            let valid_l = gather(labels, split.valid.clone());
            let model = fit_boosted_classifier(
                train_x.view(),
                &train_l,
                spec,
                Some((valid_x.view(), &valid_l)),
            )?;
            Ok(logloss_on_valid(&model, &x, labels, split.valid.clone()))
        }
    }
}

fn rank<S: Clone>(
    grid: &[S],
    splits: &[CvSplit],
    mut eval: impl FnMut(&S, &CvSplit) -> Result<f64, LearnerError>,
) -> Result<TuneOutcome<S>, LearnerError> {
    if grid.is_empty() {
        return Err(LearnerError::EmptyGrid);
    }
    if splits.is_empty() {
        return Err(LearnerError::NoSplits);
    }
    let mut scores = Vec::with_capacity(grid.len());
    for spec in grid {
        let mut total = 0.0;
        let mut ok = true;
        for split in splits {
            match eval(spec, split) {
                Ok(s) => total += s,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        scores.push(GridScore {
            spec: spec.clone(),
            score: ok.then(|| total / splits.len() as f64),
        });
    }
    let best_index = scores
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.score.map(|s| (i, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or(LearnerError::AllSpecsFailed)?;
    Ok(TuneOutcome { best_index, best: grid[best_index].clone(), scores })
}

/// Grid-searches forest specs; lower mean validation score wins.
pub fn tune_forest(
    data: &TuneData<'_>,
    grid: &[ForestSpec],
    splits: &[CvSplit],
) -> Result<TuneOutcome<ForestSpec>, LearnerError> {
    rank(grid, splits, |spec, split| eval_forest(data, spec, split))
}

/// Grid-searches booster specs; lower mean validation score wins. Each
/// split's validation block doubles as the early-stopping set.
pub fn tune_boost(
    data: &TuneData<'_>,
    grid: &[BoostSpec],
    splits: &[CvSplit],
) -> Result<TuneOutcome<BoostSpec>, LearnerError> {
    rank(grid, splits, |spec, split| eval_boost(data, spec, split))
}

/// Picks the candidate that wins most often across repeated draws.
/// `winners` holds one winning candidate index per draw; ties on frequency
/// fall back to the better (lower) tie-break score, then the lower index.
pub fn mode_vote(winners: &[usize], tie_break: &[f64]) -> Option<usize> {
    let max_idx = *winners.iter().max()?;
    let mut counts = vec![0usize; max_idx + 1];
    for &w in winners {
        counts[w] += 1;
    }
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .max_by(|(i, &ci), (j, &cj)| {
            ci.cmp(&cj)
                .then_with(|| tie_break[*j].total_cmp(&tie_break[*i]))
                .then_with(|| j.cmp(i))
        })
        .map(|(i, _)| i)
}
