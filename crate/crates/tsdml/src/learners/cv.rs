//! Gap-blocked cross-validation splits for serially dependent data.
//!
//! Folds are contiguous ranges that partition `0..t`. Each fold serves once
//! as the validation set; its training set is everything else minus `gap`
//! indices adjacent to each validation boundary, so no training point sits
//! within `gap` steps of the held-out block.

use super::LearnerError;
use std::ops::Range;

/// One train/validation split. Training indices come as contiguous ranges
/// (at most one on each side of the validation block).
#[derive(Debug, Clone, PartialEq)]
pub struct CvSplit {
    pub train: Vec<Range<usize>>,
    pub valid: Range<usize>,
}

impl CvSplit {
    /// Number of training indices.
    pub fn train_len(&self) -> usize {
        self.train.iter().map(|r| r.len()).sum()
    }

    /// Iterates the training indices in ascending order.
    pub fn train_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().flat_map(|r| r.clone())
    }
}

/// Splits `0..t` into `k` contiguous folds (sizes differing by at most one,
/// longer folds first) and builds the gap-trimmed training sets.
pub fn blocked_cv_splits(t: usize, k: usize, gap: usize) -> Result<Vec<CvSplit>, LearnerError> {
    if k < 2 {
        return Err(LearnerError::InvalidCv(format!("need k >= 2 folds, got {k}")));
    }
    if t <= k + gap {
        return Err(LearnerError::InvalidCv(format!(
            "t={t} is too short for k={k} folds with gap={gap}"
        )));
    }
    let base = t / k;
    let remainder = t % k;
    let mut splits = Vec::with_capacity(k);
    let mut start = 0usize;
    for fold in 0..k {
        let len = base + usize::from(fold < remainder);
        let valid = start..start + len;
        let mut train = Vec::with_capacity(2);
        let left_end = valid.start.saturating_sub(gap);
        if left_end > 0 {
            train.push(0..left_end);
        }
        let right_start = (valid.end + gap).min(t);
        if right_start < t {
            train.push(right_start..t);
        }
        if train.is_empty() {
            return Err(LearnerError::InvalidCv(format!(
                "fold {fold} has an empty training set (t={t}, k={k}, gap={gap})"
            )));
        }
        splits.push(CvSplit { train, valid });
        start += len;
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_folds_no_gap_are_complements() {
        let splits = blocked_cv_splits(100, 2, 0).unwrap();
        assert_eq!(splits[0].valid, 0..50);
        assert_eq!(splits[0].train, vec![50..100]);
        assert_eq!(splits[1].valid, 50..100);
        assert_eq!(splits[1].train, vec![0..50]);
    }

    #[test]
    fn gap_trims_the_training_side_of_each_boundary() {
        let splits = blocked_cv_splits(100, 2, 10).unwrap();
        // Validating on the second half trains on [0, 40).
        assert_eq!(splits[1].valid, 50..100);
        assert_eq!(splits[1].train, vec![0..40]);
        assert_eq!(splits[0].train, vec![60..100]);
    }

    #[test]
    fn interior_folds_lose_gap_indices_on_both_sides() {
        let splits = blocked_cv_splits(1000, 10, 24).unwrap();
        for (i, s) in splits.iter().enumerate() {
            assert_eq!(s.valid, i * 100..(i + 1) * 100);
            let expected: usize = match i {
                0 | 9 => 900 - 24,
                _ => 900 - 48,
            };
            assert_eq!(s.train_len(), expected, "fold {i}");
        }
    }

    #[test]
    fn validation_folds_partition_the_index_range() {
        for (t, k, gap) in [(100, 2, 0), (101, 3, 5), (57, 5, 2), (1000, 10, 24)] {
            let splits = blocked_cv_splits(t, k, gap).unwrap();
            let mut seen = vec![false; t];
            for s in &splits {
                for i in s.valid.clone() {
                    assert!(!seen[i], "index {i} validated twice");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&b| b), "validation folds must cover 0..{t}");
        }
    }

    #[test]
    fn no_training_index_is_within_gap_of_its_fold() {
        for (t, k, gap) in [(101, 3, 5), (200, 4, 7)] {
            for s in blocked_cv_splits(t, k, gap).unwrap() {
                for i in s.train_indices() {
                    let dist = if i < s.valid.start {
                        s.valid.start - i
                    } else {
                        i + 1 - s.valid.end
                    };
                    assert!(dist > gap, "train {i} too close to {:?}", s.valid);
                }
            }
        }
    }

    #[test]
    fn degenerate_parameters_error() {
        assert!(blocked_cv_splits(100, 1, 0).is_err());
        assert!(blocked_cv_splits(10, 10, 0).is_err());
        assert!(blocked_cv_splits(10, 2, 8).is_err());
        // Gap so large that every fold loses all its training data.
        assert!(blocked_cv_splits(30, 3, 25).is_err());
    }
}
