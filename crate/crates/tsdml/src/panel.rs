//! The observed time series (outcome, treatment, confounders) on a regular
//! 0..T-1 index, and the horizon-shifted samples the estimators run on.
//!
//! A horizon sample pairs each time index `t` with the outcome `h` periods
//! ahead: entries are `(t, y_fwd = y[t+h], d[t], x[t])` for `t = 0..T-1-h`.
//! Lagged regressors are the ingestion layer's responsibility: lag columns are
//! appended to `x` before a `Panel` is built, so the shift logic here stays
//! single-purpose.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("panel needs at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("panel needs at least 1 confounder column")]
    NoConfounders,
    #[error("column lengths disagree: y has {y}, d has {d}, x has {x} rows")]
    ShapeMismatch { y: usize, d: usize, x: usize },
    #[error("confounder rows must all have the same length")]
    RaggedConfounders,
    #[error("treatment code set must be non-empty and free of duplicates")]
    BadCodeSet,
    #[error("horizon {h} exceeds sample length {t}")]
    HorizonExceedsSample { h: usize, t: usize },
    #[error("samples are incompatible: {left} vs {right}")]
    IncompatibleSamples { left: String, right: String },
}

/// One validation finding. Diagnostics are reported, not raised: callers
/// decide whether a violation aborts the run.
#[derive(Debug, Clone, PartialEq)]
pub enum PanelDiagnostic {
    NonFiniteOutcome { t: usize },
    NonFiniteConfounder { t: usize, col: usize },
    UnknownTreatmentCode { t: usize, code: u8 },
}

impl std::fmt::Display for PanelDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NonFiniteOutcome { t } => write!(f, "non-finite outcome at t={t}"),
            Self::NonFiniteConfounder { t, col } => {
                write!(f, "non-finite confounder at t={t}, column {col}")
            }
            Self::UnknownTreatmentCode { t, code } => {
                write!(f, "unknown treatment code {code} at t={t}")
            }
        }
    }
}

/// The observed series: outcome `y`, discrete treatment `d` (codes from a
/// declared finite set), and an `n`-dimensional confounder vector per time
/// index. Indices are the implicit regular grid `0..len()`; original
/// timestamps, if any, live with the caller as metadata.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    y: Vec<f64>,
    d: Vec<u8>,
    x: Vec<f64>, // row-major, len() * n_confounders
    n: usize,
    codes: Vec<u8>,
}

impl Panel {
    /// Builds a panel from columns. `x_rows[t]` is the confounder vector at
    /// `t`. Shape errors are hard failures; value-level problems (non-finite
    /// entries, out-of-set codes) are left to [`validate_panel`].
    pub fn new(
        y: Vec<f64>,
        d: Vec<u8>,
        x_rows: Vec<Vec<f64>>,
        codes: Vec<u8>,
    ) -> Result<Self, PanelError> {
        if y.len() != d.len() || y.len() != x_rows.len() {
            return Err(PanelError::ShapeMismatch {
                y: y.len(),
                d: d.len(),
                x: x_rows.len(),
            });
        }
        if y.len() < 2 {
            return Err(PanelError::TooShort(y.len()));
        }
        let n = x_rows[0].len();
        if n == 0 {
            return Err(PanelError::NoConfounders);
        }
        if x_rows.iter().any(|r| r.len() != n) {
            return Err(PanelError::RaggedConfounders);
        }
        let mut sorted = codes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if codes.is_empty() || sorted.len() != codes.len() {
            return Err(PanelError::BadCodeSet);
        }
        let mut x = Vec::with_capacity(y.len() * n);
        for row in &x_rows {
            x.extend_from_slice(row);
        }
        Ok(Self { y, d, x, n, codes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Number of confounder columns.
    pub fn n_confounders(&self) -> usize {
        self.n
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[u8] {
        &self.d
    }

    pub fn x_row(&self, t: usize) -> &[f64] {
        &self.x[t * self.n..(t + 1) * self.n]
    }

    /// Declared treatment code set.
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }
}

/// Checks value-level invariants: finite outcomes and confounders, treatment
/// codes within the declared set. Returns one diagnostic per violation; an
/// empty list means the panel is clean.
pub fn validate_panel(panel: &Panel) -> Vec<PanelDiagnostic> {
    let mut out = Vec::new();
    for t in 0..panel.len() {
        if !panel.y[t].is_finite() {
            out.push(PanelDiagnostic::NonFiniteOutcome { t });
        }
        for (col, v) in panel.x_row(t).iter().enumerate() {
            if !v.is_finite() {
                out.push(PanelDiagnostic::NonFiniteConfounder { t, col });
            }
        }
        if !panel.codes.contains(&panel.d[t]) {
            out.push(PanelDiagnostic::UnknownTreatmentCode {
                t,
                code: panel.d[t],
            });
        }
    }
    out
}

/// The derived estimation sample for one horizon: `(y_fwd, d, x)` per entry,
/// where `y_fwd` at entry `t` is the panel outcome at `t + h`.
///
/// Owns its data so sub-ranges can be sliced off cheaply (fold handling);
/// immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSample {
    h: usize,
    n: usize,
    y_fwd: Vec<f64>,
    d: Vec<u8>,
    x: Vec<f64>, // row-major, len() * n
    codes: Vec<u8>,
}

impl HorizonSample {
    pub fn horizon(&self) -> usize {
        self.h
    }

    pub fn len(&self) -> usize {
        self.y_fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_fwd.is_empty()
    }

    pub fn n_confounders(&self) -> usize {
        self.n
    }

    pub fn y_fwd(&self) -> &[f64] {
        &self.y_fwd
    }

    pub fn d(&self) -> &[u8] {
        &self.d
    }

    pub fn x_row(&self, t: usize) -> &[f64] {
        &self.x[t * self.n..(t + 1) * self.n]
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Copies out a contiguous sub-range of entries as its own sample
    /// (same horizon). Entry `i` of the slice is entry `range.start + i`.
    /// Stacks two compatible samples (same horizon, width, and code set)
    /// into one. The result has no time continuity across the seam; use it
    /// only for row-based pooling.
    pub fn concat(&self, other: &HorizonSample) -> Result<HorizonSample, PanelError> {
        if self.h != other.h
            || self.n != other.n
            || self.codes != other.codes
        {
            return Err(PanelError::IncompatibleSamples {
                left: format!("h={}, n={}, codes={:?}", self.h, self.n, self.codes),
                right: format!("h={}, n={}, codes={:?}", other.h, other.n, other.codes),
            });
        }
        let mut y_fwd = self.y_fwd.clone();
        y_fwd.extend_from_slice(&other.y_fwd);
        let mut d = self.d.clone();
        d.extend_from_slice(&other.d);
        let mut x = self.x.clone();
        x.extend_from_slice(&other.x);
        Ok(HorizonSample { h: self.h, n: self.n, y_fwd, d, x, codes: self.codes.clone() })
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> HorizonSample {
        assert!(range.end <= self.len(), "slice range out of bounds");
        HorizonSample {
            h: self.h,
            n: self.n,
            y_fwd: self.y_fwd[range.clone()].to_vec(),
            d: self.d[range.clone()].to_vec(),
            x: self.x[range.start * self.n..range.end * self.n].to_vec(),
            codes: self.codes.clone(),
        }
    }
}

/// Builds the estimation sample for horizon `h`: `T - h` entries with
/// `y_fwd[t] = y[t + h]`. Pure function of its inputs.
pub fn build_horizon_sample(panel: &Panel, h: usize) -> Result<HorizonSample, PanelError> {
    let t_len = panel.len();
    if h >= t_len {
        return Err(PanelError::HorizonExceedsSample { h, t: t_len });
    }
    let m = t_len - h;
    Ok(HorizonSample {
        h,
        n: panel.n,
        y_fwd: panel.y[h..].to_vec(),
        d: panel.d[..m].to_vec(),
        x: panel.x[..m * panel.n].to_vec(),
        codes: panel.codes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_panel(t: usize) -> Panel {
        let y: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let d: Vec<u8> = (0..t).map(|i| (i % 2) as u8).collect();
        let x: Vec<Vec<f64>> = (0..t).map(|i| vec![i as f64 * 0.5, -(i as f64)]).collect();
        Panel::new(y, d, x, vec![0, 1]).unwrap()
    }

    #[test]
    fn well_formed_panel_has_no_diagnostics() {
        assert!(validate_panel(&toy_panel(10)).is_empty());
    }

    #[test]
    fn non_finite_outcome_is_reported_with_location() {
        let mut y: Vec<f64> = (0..6).map(|i| i as f64).collect();
        y[3] = f64::NAN;
        let d = vec![0, 1, 0, 1, 0, 1];
        let x = vec![vec![0.0]; 6];
        let p = Panel::new(y, d, x, vec![0, 1]).unwrap();
        let diags = validate_panel(&p);
        assert_eq!(diags, vec![PanelDiagnostic::NonFiniteOutcome { t: 3 }]);
    }

    #[test]
    fn out_of_set_treatment_code_is_reported() {
        let y = vec![0.0; 4];
        let d = vec![0, 1, 2, 0];
        let x = vec![vec![1.0]; 4];
        let p = Panel::new(y, d, x, vec![0, 1]).unwrap();
        let diags = validate_panel(&p);
        assert_eq!(
            diags,
            vec![PanelDiagnostic::UnknownTreatmentCode { t: 2, code: 2 }]
        );
    }

    #[test]
    fn non_finite_confounder_names_row_and_column() {
        let y = vec![0.0; 3];
        let d = vec![0, 1, 0];
        let x = vec![vec![0.0, 0.0], vec![0.0, f64::INFINITY], vec![0.0, 0.0]];
        let p = Panel::new(y, d, x, vec![0, 1]).unwrap();
        assert_eq!(
            validate_panel(&p),
            vec![PanelDiagnostic::NonFiniteConfounder { t: 1, col: 1 }]
        );
    }

    #[test]
    fn horizon_zero_is_the_identity_shift() {
        let p = toy_panel(10);
        let s = build_horizon_sample(&p, 0).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.y_fwd(), p.y());
        assert_eq!(s.d(), p.d());
    }

    #[test]
    fn horizon_three_shifts_and_truncates() {
        let p = toy_panel(10);
        let s = build_horizon_sample(&p, 3).unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(s.y_fwd()[0], p.y()[3]);
        assert_eq!(s.y_fwd()[6], p.y()[9]);
        // Treatment and confounders stay at their own time index.
        assert_eq!(s.d()[0], p.d()[0]);
        assert_eq!(s.x_row(6), p.x_row(6));
    }

    #[test]
    fn horizon_at_or_past_length_errors() {
        let p = toy_panel(5);
        assert!(matches!(
            build_horizon_sample(&p, 5),
            Err(PanelError::HorizonExceedsSample { h: 5, t: 5 })
        ));
    }

    #[test]
    fn entry_counts_differ_by_exactly_the_horizon_difference() {
        let p = toy_panel(23);
        for h1 in 0..5 {
            for h2 in (h1 + 1)..8 {
                let s1 = build_horizon_sample(&p, h1).unwrap();
                let s2 = build_horizon_sample(&p, h2).unwrap();
                assert_eq!(s1.len() - s2.len(), h2 - h1);
            }
        }
    }

    #[test]
    fn build_is_pure() {
        let p = toy_panel(12);
        assert_eq!(
            build_horizon_sample(&p, 2).unwrap(),
            build_horizon_sample(&p, 2).unwrap()
        );
    }

    #[test]
    fn slice_preserves_entries() {
        let p = toy_panel(10);
        let s = build_horizon_sample(&p, 1).unwrap();
        let sub = s.slice(3..7);
        assert_eq!(sub.len(), 4);
        assert_eq!(sub.y_fwd()[0], s.y_fwd()[3]);
        assert_eq!(sub.d()[2], s.d()[5]);
        assert_eq!(sub.x_row(1), s.x_row(4));
        assert_eq!(sub.horizon(), 1);
    }

    #[test]
    fn shape_errors_are_hard_failures() {
        assert!(Panel::new(vec![0.0], vec![0], vec![vec![1.0]], vec![0, 1]).is_err());
        assert!(Panel::new(vec![0.0; 3], vec![0; 2], vec![vec![1.0]; 3], vec![0, 1]).is_err());
        assert!(Panel::new(vec![0.0; 3], vec![0; 3], vec![vec![]; 3], vec![0, 1]).is_err());
        assert!(Panel::new(vec![0.0; 3], vec![0; 3], vec![vec![1.0]; 3], vec![0, 0]).is_err());
    }
}
