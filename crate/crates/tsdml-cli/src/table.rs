//! Result serialization: versioned CSV tables and a JSON-lines diagnostics
//! log.
//!
//! Every result table starts with a schema version line (`tsdml_result_v1`)
//! followed by a header row and comma-separated records. Floats are written
//! in scientific notation at 17 significant digits, so reading a table back
//! reproduces every value bit for bit. Nothing nondeterministic (timings,
//! thread counts, absolute paths) goes into these files: the same
//! configuration and seed must produce byte-identical output at any
//! parallelism.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tsdml::crossfit::{DmlEstimate, NuisanceConfig, ModelSpec};
use tsdml::dgp::TrueIrf;
use tsdml::learners::{BoostSpec, ForestSpec, MaxFeatures};
use tsdml::mc::StudyResult;
use tsdml::variance::IrfEstimate;

/// Schema tag on the first line of every result table.
pub const RESULT_VERSION: &str = "tsdml_result_v1";

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Confidence level of an alpha as a percent label ("95", "97.5").
pub fn level_label(alpha: f64) -> String {
    let pct = (1.0 - alpha) * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as u32)
    } else {
        format!("{pct}")
    }
}

fn open(path: &Path) -> std::io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> std::io::Result<()> {
    let mut w = open(path)?;
    writeln!(w, "{RESULT_VERSION}")?;
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()
}

/// One estimator's row of the estimate table.
#[derive(Debug, Clone)]
pub struct EstimateRow {
    /// Estimator name; multi-level contrasts carry the level pair.
    pub method: String,
    pub estimate: IrfEstimate,
}

/// Writes the per-(method, horizon) estimate table: point estimate, long-run
/// variance, standard error, one interval column pair per level, bandwidths,
/// and diagnostics counters.
pub fn write_estimate_table(path: &Path, rows: &[EstimateRow]) -> std::io::Result<()> {
    let alphas: Vec<f64> = rows
        .first()
        .map(|r| r.estimate.intervals.iter().map(|ci| ci.alpha).collect())
        .unwrap_or_default();
    let mut header =
        vec!["method".to_string(), "horizon".into(), "theta".into(), "variance".into(), "std_error".into()];
    for &a in &alphas {
        let label = level_label(a);
        header.push(format!("ci{label}_lo"));
        header.push(format!("ci{label}_hi"));
    }
    header.extend(["bandwidths".to_string(), "clip_events".into(), "evaluated".into()]);

    let mut lines = vec![header.join(",")];
    for row in rows {
        let e = &row.estimate;
        let mut fields = vec![
            row.method.clone(),
            e.horizon.to_string(),
            fmt_float(e.theta),
            fmt_float(e.variance),
            fmt_float(e.std_error),
        ];
        for &a in &alphas {
            let ci = e.interval(a).expect("every row carries every requested level");
            fields.push(fmt_float(ci.lo));
            fields.push(fmt_float(ci.hi));
        }
        let bandwidths: Vec<String> = e.bandwidths.iter().map(usize::to_string).collect();
        fields.push(bandwidths.join(";"));
        fields.push(e.diagnostics.clip_events.to_string());
        fields.push(e.effective_count.to_string());
        lines.push(fields.join(","));
    }
    write_lines(path, lines)
}

/// Writes the per-index score dump: each evaluated index's orthogonal score
/// for each method and horizon (fold residual plus the combined estimate).
pub fn write_score_dump(
    path: &Path,
    estimates: &[(String, DmlEstimate)],
) -> std::io::Result<()> {
    let mut lines = vec!["method,horizon,fold,index,score".to_string()];
    for (method, est) in estimates {
        for fold in &est.folds {
            for (i, r) in fold.residuals.iter().enumerate() {
                lines.push(format!(
                    "{method},{},{},{},{}",
                    est.horizon,
                    fold.fold,
                    fold.start + i,
                    fmt_float(r + est.theta)
                ));
            }
        }
    }
    write_lines(path, lines)
}

/// Writes the study summary: one row per (method, horizon, length) cell with
/// bias, spread, RMSE, and coverage per requested level.
pub fn write_study_table(path: &Path, result: &StudyResult, alphas: &[f64]) -> std::io::Result<()> {
    let mut header = vec![
        "method".to_string(),
        "h".into(),
        "T".into(),
        "truth".into(),
        "bias".into(),
        "std".into(),
        "rmse".into(),
    ];
    for &a in alphas {
        header.push(format!("cover{}", level_label(a)));
    }
    header.push("replications".into());

    let mut lines = vec![header.join(",")];
    for cell in &result.cells {
        let mut fields = vec![
            cell.method.to_string(),
            cell.h.to_string(),
            cell.t.to_string(),
            fmt_float(cell.truth),
            fmt_float(cell.bias),
            fmt_float(cell.std),
            fmt_float(cell.rmse),
        ];
        for &a in alphas {
            let cov = cell
                .coverage
                .iter()
                .find(|(ca, _)| *ca == a)
                .map(|(_, c)| *c)
                .unwrap_or(f64::NAN);
            fields.push(fmt_float(cov));
        }
        fields.push(cell.replications.to_string());
        lines.push(fields.join(","));
    }
    write_lines(path, lines)
}

/// Writes every replication's estimate (density-plot input): point estimate,
/// standard error, and the interval bounds per level.
pub fn write_replication_dump(
    path: &Path,
    result: &StudyResult,
    alphas: &[f64],
) -> std::io::Result<()> {
    let mut header = vec![
        "method".to_string(),
        "T".into(),
        "h".into(),
        "rep".into(),
        "theta".into(),
        "std_error".into(),
    ];
    for &a in alphas {
        let label = level_label(a);
        header.push(format!("ci{label}_lo"));
        header.push(format!("ci{label}_hi"));
    }
    let mut lines = vec![header.join(",")];
    for raw in &result.raw {
        let mut fields = vec![
            raw.method.to_string(),
            raw.t.to_string(),
            raw.h.to_string(),
            raw.rep.to_string(),
            fmt_float(raw.theta),
            fmt_float(raw.std_error),
        ];
        for &a in alphas {
            let ci = raw
                .intervals
                .iter()
                .find(|ci| ci.alpha == a)
                .expect("every replication carries every requested level");
            fields.push(fmt_float(ci.lo));
            fields.push(fmt_float(ci.hi));
        }
        lines.push(fields.join(","));
    }
    write_lines(path, lines)
}

/// Writes the oracle effect values with their Monte Carlo standard errors.
pub fn write_true_irf(path: &Path, irf: &TrueIrf) -> std::io::Result<()> {
    let mut lines = vec!["h,theta,mc_se,draws".to_string()];
    for (i, &h) in irf.horizons.iter().enumerate() {
        lines.push(format!(
            "{h},{},{},{}",
            fmt_float(irf.values[i]),
            fmt_float(irf.mc_ses[i]),
            irf.draws
        ));
    }
    write_lines(path, lines)
}

fn features_label(f: MaxFeatures) -> String {
    match f {
        MaxFeatures::Sqrt => "sqrt".into(),
        MaxFeatures::Log2 => "log2".into(),
        MaxFeatures::Third => "third".into(),
        MaxFeatures::All => "all".into(),
        MaxFeatures::Count(m) => m.to_string(),
    }
}

fn forest_params(spec: &ForestSpec) -> String {
    format!(
        "trees={};depth={};min_leaf={};features={};bootstrap={}",
        spec.n_trees,
        spec.max_depth,
        spec.min_leaf,
        features_label(spec.max_features),
        spec.bootstrap
    )
}

fn boost_params(spec: &BoostSpec) -> String {
    format!(
        "rate={};rounds={};depth={};child_weight={};row_share={};feature_share={}",
        spec.learning_rate,
        spec.n_rounds,
        spec.max_depth,
        spec.min_child_weight,
        spec.subsample_rows,
        spec.subsample_features
    )
}

fn model_fields(spec: &ModelSpec) -> (&'static str, String) {
    match spec {
        ModelSpec::Forest(f) => ("forest", forest_params(f)),
        ModelSpec::Boost(b) => ("boost", boost_params(b)),
    }
}

/// Writes tuned learner choices: one row per (horizon, nuisance role).
pub fn write_tuned_table(path: &Path, tuned: &[(usize, NuisanceConfig)]) -> std::io::Result<()> {
    let mut lines = vec!["horizon,role,family,params".to_string()];
    for (h, cfg) in tuned {
        for (role, spec) in
            [("treated_outcome", &cfg.mu1), ("control_outcome", &cfg.mu0), ("propensity", &cfg.e)]
        {
            let (family, params) = model_fields(spec);
            lines.push(format!("{h},{role},{family},{params}"));
        }
    }
    write_lines(path, lines)
}

/// JSON-lines diagnostics log. Entries are deterministic by design: no
/// timestamps, no host details, no thread counts.
pub struct DiagnosticsLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl DiagnosticsLog {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        let path = dir.join("diagnostics.jsonl");
        Ok(Self { writer: open(&path)?, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one event object as a line.
    pub fn log(&mut self, event: serde_json::Value) -> std::io::Result<()> {
        writeln!(self.writer, "{event}")
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.writer.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsdml::crossfit::{EstimateDiagnostics, FoldEstimate};
    use tsdml::variance::ConfidenceInterval;

    fn sample_irf() -> IrfEstimate {
        IrfEstimate {
            horizon: 1,
            theta: 0.25,
            variance: 4.0,
            std_error: 0.2,
            intervals: vec![
                ConfidenceInterval { alpha: 0.05, lo: 0.1, hi: 0.4 },
                ConfidenceInterval { alpha: 0.01, lo: 0.05, hi: 0.45 },
            ],
            effective_count: 100,
            bandwidths: vec![3, 4],
            diagnostics: EstimateDiagnostics::default(),
        }
    }

    #[test]
    fn estimate_table_has_version_header_and_level_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("estimate.csv");
        let rows = vec![EstimateRow { method: "DML".into(), estimate: sample_irf() }];
        write_estimate_table(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(RESULT_VERSION));
        let header = lines.next().unwrap();
        assert!(header.contains("ci95_lo") && header.contains("ci99_hi"), "{header}");
        let row = lines.next().unwrap();
        assert!(row.starts_with("DML,1,"));
        assert!(row.contains("3;4"));
    }

    #[test]
    fn floats_round_trip_through_the_serialized_form() {
        let values = [0.1, -1.0 / 3.0, 1e-300, std::f64::consts::PI, 13.437];
        for v in values {
            let parsed: f64 = fmt_float(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits(), "{v}");
        }
    }

    #[test]
    fn level_labels_trim_exact_percents() {
        assert_eq!(level_label(0.05), "95");
        assert_eq!(level_label(0.01), "99");
        assert_eq!(level_label(0.1), "90");
        assert_eq!(level_label(0.025), "97.5");
    }

    #[test]
    fn score_dump_reconstructs_scores_from_residuals() {
        let est = DmlEstimate {
            horizon: 0,
            theta: 2.0,
            folds: vec![FoldEstimate {
                fold: 0,
                start: 5,
                theta: 2.0,
                weight: 1.0,
                residuals: vec![-1.0, 1.0],
            }],
            effective_count: 2,
            diagnostics: EstimateDiagnostics::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        write_score_dump(&path, &[("DML".into(), est)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2], format!("DML,0,0,5,{}", fmt_float(1.0)));
        assert_eq!(lines[3], format!("DML,0,0,6,{}", fmt_float(3.0)));
    }
}
