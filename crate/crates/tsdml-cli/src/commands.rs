//! Command implementations. Each command takes the resolved run
//! configuration, drives the estimation library, writes its result files
//! into the output directory, and prints a short summary. Output files are
//! deterministic functions of the configuration and seed; anything
//! wall-clock-dependent goes to stderr only.

use anyhow::{bail, Context};
use ndarray::Array2;
use serde_json::json;

use tsdml::baselines::{
    local_projection, regression_adjustment, regression_adjustment_from_evaluations,
};
use tsdml::crossfit::{
    dml_from_evaluations, dml_estimate_multilevel, evaluate_folds, make_split_plan, DmlEstimate,
    GapSide, ModelSpec, MultilevelConfig, NuisanceConfig,
};
use tsdml::dgp::true_irf_with_draws;
use tsdml::learners::{blocked_cv_splits, tune_boost, tune_forest, BoostSpec, ForestSpec, TuneData};
use tsdml::mc::{run_study, tune_study_nuisances, LearnerFamily, TuningProtocol};
use tsdml::variance::{estimate_with_inference, BandwidthRule};
use tsdml::{build_horizon_sample, HorizonSample};

use crate::config::{EstimateSettings, EstimateTuneSection, RunConfig};
use crate::ingest::{ingest_csv, IngestReport};
use crate::table::{
    write_estimate_table, write_replication_dump, write_score_dump, write_study_table,
    write_true_irf, write_tuned_table, DiagnosticsLog, EstimateRow,
};

/// Family defaults at the requested forest size; boosting uses its standard
/// specification until tuned.
fn family_nuisance(family: LearnerFamily, trees: usize, eta: f64, seed: u64) -> NuisanceConfig {
    match family {
        LearnerFamily::Forest => NuisanceConfig {
            mu1: ModelSpec::Forest(ForestSpec { n_trees: trees, ..ForestSpec::regression() }),
            mu0: ModelSpec::Forest(ForestSpec { n_trees: trees, ..ForestSpec::regression() }),
            e: ModelSpec::Forest(ForestSpec { n_trees: trees, ..ForestSpec::classification() }),
            eta,
            seed,
        },
        LearnerFamily::Boosting => NuisanceConfig {
            mu1: ModelSpec::Boost(BoostSpec::default()),
            mu0: ModelSpec::Boost(BoostSpec::default()),
            e: ModelSpec::Boost(BoostSpec::default()),
            eta,
            seed,
        },
    }
}

/// Rows of one nuisance role: arm-filtered features plus targets, kept in
/// time order so blocked splits stay meaningful.
fn role_rows(
    sample: &HorizonSample,
    keep: impl Fn(u8) -> bool,
) -> (Array2<f64>, Vec<f64>, Vec<u8>) {
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

/// Blocked-CV grid search over the configured grids, one winner per nuisance
/// role. Boosting's early stopping is a selection device inside tuning; the
/// winning structure keeps its full round budget in the final fits (the
/// cross-fitting folds have no held-out set to stop on).
fn tune_panel_nuisances(
    sample: &HorizonSample,
    settings: &EstimateSettings,
    tune: &EstimateTuneSection,
    horizon: usize,
    seed: u64,
    log: &mut DiagnosticsLog,
) -> anyhow::Result<NuisanceConfig> {
    if sample.codes() != [0, 1] {
        bail!("tuning grids support binary treatments only");
    }
    let cv_folds = tune.cv_folds.unwrap_or(5);
    let cv_gap = tune.cv_gap.unwrap_or(settings.gap);
    let mut specs: Vec<ModelSpec> = Vec::with_capacity(3);
    for (role, treated_only) in
        [("treated_outcome", Some(true)), ("control_outcome", Some(false)), ("propensity", None)]
    {
        let (x, y, labels) = match treated_only {
            Some(true) => role_rows(sample, |d| d == 1),
            Some(false) => role_rows(sample, |d| d == 0),
            None => role_rows(sample, |_| true),
        };
        let splits = blocked_cv_splits(y.len(), cv_folds, cv_gap)
            .with_context(|| format!("tuning the {role} role at horizon {horizon}"))?;
        let propensity = treated_only.is_none();
        let data = if propensity {
            TuneData::Classification { x: x.view(), labels: &labels }
        } else {
            TuneData::Regression { x: x.view(), y: &y }
        };
        let spec = match settings.family {
            LearnerFamily::Forest => {
                let depths =
                    if tune.depths.is_empty() { vec![10, 20, 50] } else { tune.depths.clone() };
                let leaves = if tune.min_leaves.is_empty() {
                    vec![1, 5, 10]
                } else {
                    tune.min_leaves.clone()
                };
                let base = if propensity {
                    ForestSpec::classification()
                } else {
                    ForestSpec::regression()
                };
                let grid: Vec<ForestSpec> = depths
                    .iter()
                    .flat_map(|&d| {
                        let base = base.clone();
                        leaves.iter().map(move |&l| ForestSpec {
                            n_trees: settings.trees,
                            max_depth: d,
                            min_leaf: l,
                            ..base.clone()
                        })
                    })
                    .collect();
                let outcome = tune_forest(&data, &grid, &splits)
                    .with_context(|| format!("tuning the {role} forest at horizon {horizon}"))?;
                log.log(json!({
                    "event": "tuned",
                    "horizon": horizon,
                    "role": role,
                    "family": "forest",
                    "depth": outcome.best.max_depth,
                    "min_leaf": outcome.best.min_leaf,
                }))?;
                ModelSpec::Forest(ForestSpec { seed, ..outcome.best })
            }
            LearnerFamily::Boosting => {
                let depths = if tune.boost_depths.is_empty() {
                    vec![1, 3]
                } else {
                    tune.boost_depths.clone()
                };
                let rates = if tune.boost_rates.is_empty() {
                    vec![0.05, 0.1]
                } else {
                    tune.boost_rates.clone()
                };
                let grid: Vec<BoostSpec> = depths
                    .iter()
                    .flat_map(|&d| {
                        rates.iter().map(move |&r| BoostSpec {
                            max_depth: d,
                            learning_rate: r,
                            ..BoostSpec::default()
                        })
                    })
                    .collect();
                let outcome = tune_boost(&data, &grid, &splits)
                    .with_context(|| format!("tuning the {role} booster at horizon {horizon}"))?;
                log.log(json!({
                    "event": "tuned",
                    "horizon": horizon,
                    "role": role,
                    "family": "boost",
                    "depth": outcome.best.max_depth,
                    "rate": outcome.best.learning_rate,
                }))?;
                ModelSpec::Boost(BoostSpec { early_stop_patience: None, seed, ..outcome.best })
            }
        };
        specs.push(spec);
    }
    let e = specs.pop().expect("three roles");
    let mu0 = specs.pop().expect("three roles");
    let mu1 = specs.pop().expect("three roles");
    Ok(NuisanceConfig { mu1, mu0, e, eta: settings.eta, seed })
}

/// Errors unless the dependence gap covers both the longest horizon and the
/// deepest lag, or the override flag acknowledges the risk.
fn check_gap(
    settings: &EstimateSettings,
    max_h: usize,
    max_lag: usize,
    log: &mut DiagnosticsLog,
) -> anyhow::Result<()> {
    let needed = max_h.max(max_lag);
    if settings.gap >= needed {
        return Ok(());
    }
    let msg = format!(
        "dependence gap {} is smaller than max(horizon, lag) = {needed}; \
         training data would overlap the evaluation window's dependence range",
        settings.gap
    );
    if settings.allow_small_gap {
        eprintln!("WARNING: {msg} (--allow-small-gap given)");
        log.log(json!({
            "event": "gap_warning",
            "gap": settings.gap,
            "required": needed,
        }))?;
        Ok(())
    } else {
        bail!("{msg}; pass --allow-small-gap to proceed anyway");
    }
}

fn log_fit_diagnostics(
    est: &DmlEstimate,
    method: &str,
    log: &mut DiagnosticsLog,
) -> anyhow::Result<()> {
    for (fold, arms) in est.diagnostics.train_arms.iter().enumerate() {
        log.log(json!({
            "event": "fold_arms",
            "method": method,
            "horizon": est.horizon,
            "fold": fold,
            "treated": arms.0,
            "control": arms.1,
        }))?;
    }
    let clip_rate = est.diagnostics.clip_events as f64 / est.effective_count.max(1) as f64;
    if clip_rate > 0.10 {
        eprintln!(
            "WARNING: overlap clipping moved {:.1}% of propensity values at horizon {} — \
             inverse weights are dominated by the clip floor and the estimate is unreliable",
            100.0 * clip_rate,
            est.horizon
        );
        log.log(json!({
            "event": "clip_warning",
            "method": method,
            "horizon": est.horizon,
            "clip_events": est.diagnostics.clip_events,
            "rate": clip_rate,
        }))?;
    }
    Ok(())
}

fn log_ingest(report: &IngestReport, rows: usize, log: &mut DiagnosticsLog) -> anyhow::Result<()> {
    log.log(json!({
        "event": "ingest",
        "rows": rows,
        "rows_dropped": report.rows_dropped,
        "confounders": report.confounder_names,
        "levels": report.level_of_code,
        "baseline_code": report.baseline_code,
    }))?;
    Ok(())
}

fn summary_line(row: &EstimateRow) -> String {
    let e = &row.estimate;
    let ci = e.intervals.first();
    match ci {
        Some(ci) => format!(
            "{:>18}  h={:<2} theta={:+.4} se={:.4} ci{}=[{:+.4}, {:+.4}]",
            row.method,
            e.horizon,
            e.theta,
            e.std_error,
            crate::table::level_label(ci.alpha),
            ci.lo,
            ci.hi
        ),
        None => format!(
            "{:>18}  h={:<2} theta={:+.4} se={:.4}",
            row.method, e.horizon, e.theta, e.std_error
        ),
    }
}

/// Estimates impulse responses on an ingested CSV panel: cross-fitted
/// estimates with long-run inference per horizon, optional baselines, the
/// result table, and a per-index score dump.
pub fn cmd_estimate(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut log = DiagnosticsLog::create(&cfg.out)?;
    let settings = &cfg.estimate;
    let max_h = *settings.horizons.iter().max().context("at least one horizon required")?;
    let (panel, report) = ingest_csv(&cfg.data, max_h)?;
    log_ingest(&report, panel.len(), &mut log)?;
    let max_lag = cfg.data.lags.values().copied().max().unwrap_or(0);
    check_gap(settings, max_h, max_lag, &mut log)?;

    let binary = panel.codes() == [0, 1];
    if !binary && settings.tune.is_some() {
        bail!("tuning grids support binary treatments only");
    }
    if !binary && settings.baselines {
        eprintln!("note: baseline estimators are defined for binary treatments; skipping them");
        log.log(json!({"event": "baselines_skipped", "reason": "multi-level treatment"}))?;
    }

    let mut rows: Vec<EstimateRow> = Vec::new();
    let mut dumps: Vec<(String, DmlEstimate)> = Vec::new();
    for &h in &settings.horizons {
        let sample = build_horizon_sample(&panel, h)?;
        let plan = make_split_plan(sample.len(), settings.k_folds, settings.gap, GapSide::Train)?;
        let ncfg = match &settings.tune {
            Some(tune) => tune_panel_nuisances(&sample, settings, tune, h, cfg.seed, &mut log)?,
            None => family_nuisance(settings.family, settings.trees, settings.eta, cfg.seed),
        };
        if binary {
            let evaluations = evaluate_folds(&sample, &plan, &ncfg, true)?;
            let est = dml_from_evaluations(&sample, &plan, &evaluations)?;
            log_fit_diagnostics(&est, "DML", &mut log)?;
            let irf = estimate_with_inference(&est, BandwidthRule::Auto, &settings.alphas)?;
            rows.push(EstimateRow { method: "DML".into(), estimate: irf });
            dumps.push(("DML".into(), est));
            if settings.baselines {
                let rac = regression_adjustment_from_evaluations(
                    &sample,
                    &plan,
                    &evaluations,
                    BandwidthRule::Auto,
                    &settings.alphas,
                )?;
                rows.push(EstimateRow { method: rac.method.to_string(), estimate: rac.estimate });
                let ra = regression_adjustment(
                    &sample,
                    None,
                    &ncfg,
                    BandwidthRule::Auto,
                    &settings.alphas,
                )?;
                rows.push(EstimateRow { method: ra.method.to_string(), estimate: ra.estimate });
                let lp = local_projection(&sample, BandwidthRule::Auto, &settings.alphas)?;
                rows.push(EstimateRow { method: lp.method.to_string(), estimate: lp.estimate });
            }
        } else {
            let mlcfg = MultilevelConfig {
                outcome: ncfg.mu1.clone(),
                propensity: ncfg.e.clone(),
                baseline: report.baseline_code,
                eta: settings.eta,
                seed: cfg.seed,
            };
            let ml = dml_estimate_multilevel(&sample, &plan, &mlcfg)?;
            let base_value = report.level_of_code[ml.baseline as usize];
            for (j, est) in ml.estimates.iter().enumerate() {
                let level_value = report.level_of_code[ml.levels[j] as usize];
                let method = format!("DML[{level_value} vs {base_value}]");
                log_fit_diagnostics(est, &method, &mut log)?;
                let irf = estimate_with_inference(est, BandwidthRule::Auto, &settings.alphas)?;
                rows.push(EstimateRow { method: method.clone(), estimate: irf });
                dumps.push((method, est.clone()));
            }
        }
    }

    let table_path = cfg.out.join("estimate.csv");
    write_estimate_table(&table_path, &rows)?;
    let scores_path = cfg.out.join("scores.csv");
    write_score_dump(&scores_path, &dumps)?;
    log.finish()?;
    for row in &rows {
        println!("{}", summary_line(row));
    }
    println!("wrote {} and {}", table_path.display(), scores_path.display());
    Ok(())
}

/// Runs the Monte Carlo study and writes the summary table, the
/// per-replication dump, tuned specifications when tuning ran, and the bias
/// scaling report when several series lengths were run.
pub fn cmd_simulate(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut log = DiagnosticsLog::create(&cfg.out)?;
    let study = &cfg.simulate;
    let result = run_study(study)?;
    log.log(json!({
        "event": "truth",
        "horizons": result.truth.horizons,
        "values": result.truth.values,
        "mc_ses": result.truth.mc_ses,
        "draws": result.truth.draws,
    }))?;
    for f in &result.failures {
        log.log(json!({
            "event": "replication_failure",
            "method": f.method.to_string(),
            "T": f.t,
            "rep": f.rep,
            "message": f.message,
        }))?;
    }
    if let Some(tuned) = &result.tuned {
        let tuned_path = cfg.out.join("tuned.csv");
        write_tuned_table(&tuned_path, tuned)?;
        println!("wrote {}", tuned_path.display());
    }
    let study_path = cfg.out.join("study.csv");
    write_study_table(&study_path, &result, &study.alphas)?;
    let reps_path = cfg.out.join("replications.csv");
    write_replication_dump(&reps_path, &result, &study.alphas)?;

    for cell in &result.cells {
        let covers: Vec<String> = cell
            .coverage
            .iter()
            .map(|(a, c)| format!("C{}={:.3}", crate::table::level_label(*a), c))
            .collect();
        println!(
            "{:>5} h={:<2} T={:<6} bias={:.4} std={:.4} rmse={:.4} {} ({} reps)",
            cell.method.to_string(),
            cell.h,
            cell.t,
            cell.bias,
            cell.std,
            cell.rmse,
            covers.join(" "),
            cell.replications
        );
    }
    if study.t_list.len() >= 2 && study.methods.contains(&tsdml::mc::Method::Dml) {
        for &h in &study.horizons {
            let scaling = result.dml_bias_scaling(h);
            log.log(json!({
                "event": "bias_scaling",
                "h": h,
                "slope": scaling.slope,
                "gap_from_root_t": scaling.gap_from_root_t,
                "points": scaling
                    .points
                    .iter()
                    .map(|p| json!({"T": p.t, "bias": p.bias, "excluded": p.excluded}))
                    .collect::<Vec<_>>(),
            }))?;
            match scaling.slope {
                Some(s) => println!("bias scaling h={h}: log-log slope {s:.3}"),
                None => println!("bias scaling h={h}: not identified (fewer than two usable points)"),
            }
        }
    }
    if !result.failures.is_empty() {
        eprintln!(
            "note: {} replication(s) failed; see {}",
            result.failures.len(),
            log.path().display()
        );
    }
    log.finish()?;
    println!("wrote {} and {}", study_path.display(), reps_path.display());
    Ok(())
}

/// Computes and writes the process's true effect values with their Monte
/// Carlo standard errors.
pub fn cmd_true_irf(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    let irf = true_irf_with_draws(&cfg.dgp, &cfg.true_irf_horizons, cfg.true_irf_draws)?;
    let path = cfg.out.join("true_irf.csv");
    write_true_irf(&path, &irf)?;
    for (i, &h) in irf.horizons.iter().enumerate() {
        println!("theta({h}) = {:.6} +- {:.6} (mc se)", irf.values[i], irf.mc_ses[i]);
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Tunes nuisance learners and writes the chosen specifications: on the
/// configured CSV panel when one is given (blocked CV per horizon and role),
/// otherwise on simulated draw pairs from the study configuration.
pub fn cmd_tune(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut log = DiagnosticsLog::create(&cfg.out)?;
    let tuned: Vec<(usize, NuisanceConfig)> = if cfg.data.path.is_some() {
        let settings = &cfg.estimate;
        let max_h = *settings.horizons.iter().max().context("at least one horizon required")?;
        let (panel, report) = ingest_csv(&cfg.data, max_h)?;
        log_ingest(&report, panel.len(), &mut log)?;
        let grids = settings.tune.clone().unwrap_or_default();
        settings
            .horizons
            .iter()
            .map(|&h| {
                let sample = build_horizon_sample(&panel, h)?;
                let ncfg =
                    tune_panel_nuisances(&sample, settings, &grids, h, cfg.seed, &mut log)?;
                Ok((h, ncfg))
            })
            .collect::<anyhow::Result<_>>()?
    } else {
        let mut study = cfg.simulate.clone();
        if study.tuning.is_none() {
            study.tuning = Some(if cfg.paper_scale {
                TuningProtocol::paper()
            } else {
                TuningProtocol::desk()
            });
        }
        tune_study_nuisances(&study)?
    };
    let path = cfg.out.join("tuned.csv");
    write_tuned_table(&path, &tuned)?;
    log.finish()?;
    println!("wrote {}", path.display());
    Ok(())
}
