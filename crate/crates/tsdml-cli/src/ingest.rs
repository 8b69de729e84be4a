//! CSV ingestion: named columns to a validated panel, with treatment-value
//! coding and lag construction.
//!
//! The file needs a header row; cells are decimal reals (period separator,
//! scientific notation accepted). Treatment values are mapped to codes by
//! their ascending rank among the declared levels. Lag directives append
//! shifted copies of named columns as extra confounders and drop the first
//! max-lag rows, so every remaining row has all its lags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;
use tsdml::panel::{validate_panel, Panel, PanelDiagnostic, PanelError};

use crate::config::DataSection;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed CSV at {path}: {source}")]
    MalformedCsv {
        path: PathBuf,
        source: Box<csv::Error>,
    },
    #[error("missing column \"{0}\" in the CSV header")]
    MissingColumn(String),
    #[error("config names no {0} column")]
    MissingConfig(&'static str),
    #[error("cannot parse \"{cell}\" in row {row}, column \"{column}\"")]
    BadCell {
        row: usize,
        column: String,
        cell: String,
    },
    #[error("unknown treatment value {value} in row {row} (declared levels: {levels:?})")]
    UnknownTreatment {
        row: usize,
        value: f64,
        levels: Vec<f64>,
    },
    #[error("time column must increase strictly; row {row} does not")]
    NonIncreasingTime { row: usize },
    #[error("{rows} data rows are fewer than lags + max horizon + 2 = {needed}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("baseline {baseline} is not one of the declared levels {levels:?}")]
    BaselineOutsideLevels { baseline: f64, levels: Vec<f64> },
    #[error("duplicate declared treatment levels {0:?}")]
    DuplicateLevels(Vec<f64>),
    #[error("lag directive names unknown column \"{0}\"")]
    UnknownLagColumn(String),
    #[error("panel validation found hard violations: {0}")]
    InvalidPanel(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// What ingestion produced besides the panel itself.
#[derive(Debug, Clone)]
pub struct IngestReport {
    /// Treatment value of each code, ascending (index = code).
    pub level_of_code: Vec<f64>,
    /// Code of the declared baseline level.
    pub baseline_code: u8,
    /// Confounder column names in panel order (lag columns included).
    pub confounder_names: Vec<String>,
    /// Rows dropped from the front for lag construction.
    pub rows_dropped: usize,
}

/// Reads and validates the CSV named in `data`, producing the panel the
/// estimators run on. `max_horizon` enters the minimum-length check.
pub fn ingest_csv(
    data: &DataSection,
    max_horizon: usize,
) -> Result<(Panel, IngestReport), IngestError> {
    let path = data.path.as_ref().ok_or(IngestError::MissingConfig("data.path"))?;
    let time_col = data.time.as_ref().ok_or(IngestError::MissingConfig("time"))?;
    let outcome_col = data.outcome.as_ref().ok_or(IngestError::MissingConfig("outcome"))?;
    let treatment_col = data.treatment.as_ref().ok_or(IngestError::MissingConfig("treatment"))?;
    if data.confounders.is_empty() {
        return Err(IngestError::MissingConfig("confounders"));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => IngestError::Unreadable {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => IngestError::MalformedCsv { path: path.clone(), source: Box::new(e) },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| IngestError::MalformedCsv { path: path.clone(), source: Box::new(e) })?
        .clone();
    let col_index = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };

    let ti = col_index(time_col)?;
    let yi = col_index(outcome_col)?;
    let di = col_index(treatment_col)?;
    let xi: Vec<usize> = data
        .confounders
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_, _>>()?;

    // Lag sources may be any named column.
    let mut lag_sources: Vec<(String, usize, usize)> = Vec::new(); // (name, col, count)
    for (name, &count) in &data.lags {
        if count == 0 {
            continue;
        }
        let idx = col_index(name).map_err(|_| IngestError::UnknownLagColumn(name.clone()))?;
        lag_sources.push((name.clone(), idx, count));
    }
    let max_lag = lag_sources.iter().map(|(_, _, c)| *c).max().unwrap_or(0);

    // Declared coding: ascending rank = code.
    let mut levels = data.levels.clone().unwrap_or_else(|| vec![0.0, 1.0]);
    levels.sort_by(f64::total_cmp);
    let deduped = {
        let mut v = levels.clone();
        v.dedup_by(|a, b| a == b);
        v
    };
    if deduped.len() != levels.len() {
        return Err(IngestError::DuplicateLevels(levels));
    }
    let baseline = data.baseline.unwrap_or(levels[0]);
    let baseline_code = levels
        .iter()
        .position(|&l| l == baseline)
        .ok_or_else(|| IngestError::BaselineOutsideLevels { baseline, levels: levels.clone() })?
        as u8;

    // Parse every needed cell. `row` in errors is the 1-based physical line
    // (the header is line 1).
    let mut time = Vec::new();
    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut lag_values: Vec<Vec<f64>> = vec![Vec::new(); lag_sources.len()];
    for (rec_no, record) in reader.records().enumerate() {
        let row = rec_no + 2;
        let record =
            record.map_err(|e| IngestError::MalformedCsv { path: path.clone(), source: Box::new(e) })?;
        let parse = |col: usize, name: &str| -> Result<f64, IngestError> {
            let cell = record.get(col).unwrap_or("");
            cell.parse::<f64>().map_err(|_| IngestError::BadCell {
                row,
                column: name.to_string(),
                cell: cell.to_string(),
            })
        };
        time.push(parse(ti, time_col)?);
        y.push(parse(yi, outcome_col)?);
        let dv = parse(di, treatment_col)?;
        let code = levels.iter().position(|&l| l == dv).ok_or(IngestError::UnknownTreatment {
            row,
            value: dv,
            levels: levels.clone(),
        })?;
        d.push(code as u8);
        let mut xr = Vec::with_capacity(xi.len());
        for (j, &c) in xi.iter().enumerate() {
            xr.push(parse(c, &data.confounders[j])?);
        }
        x_rows.push(xr);
        for (s, (name, col, _)) in lag_sources.iter().enumerate() {
            lag_values[s].push(parse(*col, name)?);
        }
    }

    let rows = y.len();
    let needed = max_lag + max_horizon + 2;
    if rows < needed {
        return Err(IngestError::TooFewRows { rows, needed });
    }
    for t in 1..rows {
        if time[t] <= time[t - 1] {
            return Err(IngestError::NonIncreasingTime { row: t + 2 });
        }
    }

    // Append lag columns and drop the first max_lag rows.
    let mut confounder_names = data.confounders.clone();
    for (s, (name, _, count)) in lag_sources.iter().enumerate() {
        for k in 1..=*count {
            confounder_names.push(format!("{name}_lag{k}"));
            for t in max_lag..rows {
                x_rows[t].push(lag_values[s][t - k]);
            }
        }
    }
    let y: Vec<f64> = y[max_lag..].to_vec();
    let d: Vec<u8> = d[max_lag..].to_vec();
    let x_rows: Vec<Vec<f64>> = x_rows[max_lag..].to_vec();

    let codes: Vec<u8> = (0..levels.len() as u8).collect();
    let panel = Panel::new(y, d, x_rows, codes)?;
    let diagnostics = validate_panel(&panel);
    let hard: Vec<&PanelDiagnostic> = diagnostics
        .iter()
        .filter(|d| {
            matches!(
                d,
                PanelDiagnostic::NonFiniteOutcome { .. }
                    | PanelDiagnostic::NonFiniteConfounder { .. }
                    | PanelDiagnostic::UnknownTreatmentCode { .. }
            )
        })
        .collect();
    if !hard.is_empty() {
        let listed: Vec<String> = hard.iter().take(5).map(|d| d.to_string()).collect();
        return Err(IngestError::InvalidPanel(listed.join("; ")));
    }

    Ok((
        panel,
        IngestReport {
            level_of_code: levels,
            baseline_code,
            confounder_names,
            rows_dropped: max_lag,
        },
    ))
}

/// Writes a panel as a CSV that `ingest_csv` reads back exactly: a 0..T-1
/// time column, the outcome, the treatment as its level value, and one
/// column per confounder, all floats at 17 significant digits.
pub fn export_panel_csv(
    panel: &Panel,
    level_of_code: &[f64],
    path: &Path,
) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| IngestError::Unreadable {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let n = panel.n_confounders();
    let mut header = vec!["time".to_string(), "y".to_string(), "d".to_string()];
    header.extend((1..=n).map(|j| format!("x{j}")));
    let io_err = |e: csv::Error| IngestError::Unreadable {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    writer.write_record(&header).map_err(io_err)?;
    for t in 0..panel.len() {
        let mut record = vec![
            t.to_string(),
            format!("{:.16e}", panel.y()[t]),
            format!("{:.16e}", level_of_code[panel.d()[t] as usize]),
        ];
        record.extend(panel.x_row(t).iter().map(|v| format!("{v:.16e}")));
        writer.write_record(&record).map_err(io_err)?;
    }
    writer.flush().map_err(|e| IngestError::Unreadable {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Ingestion settings for an exported panel (the inverse of
/// [`export_panel_csv`]'s column layout).
pub fn export_layout(path: &Path, n_confounders: usize, levels: Vec<f64>) -> DataSection {
    DataSection {
        path: Some(path.to_path_buf()),
        time: Some("time".into()),
        outcome: Some("y".into()),
        treatment: Some("d".into()),
        confounders: (1..=n_confounders).map(|j| format!("x{j}")).collect(),
        levels: Some(levels),
        baseline: None,
        lags: BTreeMap::new(),
    }
}
