//! Run configuration: a plain-text file (TOML sections of flat key/value
//! pairs) merged with command-line flag overrides. Flags always win over
//! file values; anything left unset falls back to documented defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;
use tsdml::dgp::DgpConfig;
use tsdml::mc::{LearnerFamily, Method, Scenario, StudyConfig, TuningProtocol};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config file {path}: {source}")]
    Unparseable {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Shorthand for the usage errors that should list the valid values.
fn bad_value(field: &str, got: &str, valid: &[&str]) -> ConfigError {
    ConfigError::Invalid(format!("unknown {field} \"{got}\"; valid values: {}", valid.join(", ")))
}

/// The `[data]` section: where the input CSV is and how to read it.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// Time column name.
    pub time: Option<String>,
    pub outcome: Option<String>,
    pub treatment: Option<String>,
    /// Confounder column names, in panel order.
    #[serde(default)]
    pub confounders: Vec<String>,
    /// Declared treatment values; the sorted position of a value is its
    /// code. Defaults to binary {0, 1}.
    pub levels: Option<Vec<f64>>,
    /// Declared baseline treatment value; must be one of `levels`.
    pub baseline: Option<f64>,
    /// Lag directives: column name -> number of lags appended as extra
    /// confounder columns (dropping the first max-lag rows).
    #[serde(default)]
    pub lags: std::collections::BTreeMap<String, usize>,
}

/// The `[estimate]` section.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub horizons: Option<Vec<usize>>,
    pub k_folds: Option<usize>,
    pub gap: Option<usize>,
    pub learner: Option<String>,
    pub trees: Option<usize>,
    /// Propensity clipping floor.
    pub eta: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub baselines: Option<bool>,
    pub allow_small_gap: Option<bool>,
    /// Optional blocked-CV tuning grids; when present, nuisances are tuned
    /// on the panel before estimation.
    pub tune: Option<EstimateTuneSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateTuneSection {
    /// Forest depth grid (forest learner).
    #[serde(default)]
    pub depths: Vec<u32>,
    /// Forest minimum-leaf grid (forest learner).
    #[serde(default)]
    pub min_leaves: Vec<usize>,
    /// Boosting tree-depth grid (boosting learner).
    #[serde(default)]
    pub boost_depths: Vec<u32>,
    /// Boosting learning-rate grid (boosting learner).
    #[serde(default)]
    pub boost_rates: Vec<f64>,
    pub cv_folds: Option<usize>,
    /// Embargo gap between CV training and validation blocks.
    pub cv_gap: Option<usize>,
}

/// The `[simulate]` section.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: Option<String>,
    pub horizons: Option<Vec<usize>>,
    pub t_list: Option<Vec<usize>>,
    pub replications: Option<usize>,
    pub k_folds: Option<usize>,
    pub gap: Option<usize>,
    pub learner: Option<String>,
    pub trees: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub oracle_draws: Option<usize>,
    /// Lagged outcome columns appended to the simulated confounders.
    pub outcome_lags: Option<usize>,
    /// Run the tuning phase before the replications.
    pub tune: Option<bool>,
    /// Which estimators to run; defaults to DML + both RA variants + LP.
    pub methods: Option<Vec<String>>,
}

/// The `[dgp]` section: simulated-process parameters.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DgpSection {
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub gamma: Option<f64>,
    pub sigma_eps: Option<f64>,
    pub d_y: Option<f64>,
    pub ma_order: Option<usize>,
    pub burn_in: Option<usize>,
    pub null_effect: Option<bool>,
}

/// The `[true_irf]` section.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrueIrfSection {
    pub horizons: Option<Vec<usize>>,
    pub draws: Option<usize>,
}

/// The whole configuration file.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub paper_scale: Option<bool>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub dgp: DgpSection,
    #[serde(default)]
    pub true_irf: TrueIrfSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Unparseable {
            path: path.to_path_buf(),
            source: Box::new(source),
        })
    }
}

/// Flag overrides, already parsed by the CLI layer. `None`/`false` means
/// "not given".
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub horizons: Option<Vec<usize>>,
    pub k_folds: Option<usize>,
    pub gap: Option<usize>,
    pub learner: Option<String>,
    pub baselines: bool,
    pub paper_scale: bool,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub allow_small_gap: bool,
}

/// Everything resolved: the merged, validated settings each command reads.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub paper_scale: bool,
    pub data: DataSection,
    pub estimate: EstimateSettings,
    pub simulate: StudyConfig,
    /// Run the study's tuning phase (protocol scaled with `paper_scale`).
    pub simulate_tune: bool,
    pub dgp: DgpConfig,
    pub true_irf_horizons: Vec<usize>,
    pub true_irf_draws: usize,
}

#[derive(Debug, Clone)]
pub struct EstimateSettings {
    pub horizons: Vec<usize>,
    pub k_folds: usize,
    pub gap: usize,
    pub family: LearnerFamily,
    pub trees: usize,
    pub eta: f64,
    pub alphas: Vec<f64>,
    pub baselines: bool,
    pub allow_small_gap: bool,
    pub tune: Option<EstimateTuneSection>,
}

pub const DESK_REPLICATIONS: usize = 200;
pub const DESK_TREES: usize = 100;
pub const PAPER_REPLICATIONS: usize = 1000;
pub const PAPER_TREES: usize = 500;

fn parse_family(name: &str) -> Result<LearnerFamily, ConfigError> {
    match name {
        "forest" => Ok(LearnerFamily::Forest),
        "boosting" => Ok(LearnerFamily::Boosting),
        other => Err(bad_value("learner", other, &["forest", "boosting"])),
    }
}

fn parse_scenario(name: &str) -> Result<Scenario, ConfigError> {
    match name {
        "one-sample" => Ok(Scenario::OneSample),
        "two-sample" => Ok(Scenario::TwoSample),
        other => Err(bad_value("scenario", other, &["one-sample", "two-sample"])),
    }
}

fn parse_method(name: &str) -> Result<Method, ConfigError> {
    match name {
        "DML" | "dml" => Ok(Method::Dml),
        "RA^c" | "ra-crossfit" => Ok(Method::CrossFitRa),
        "RA" | "ra" => Ok(Method::InSampleRa),
        "LP" | "lp" => Ok(Method::Lp),
        other => Err(bad_value("method", other, &["dml", "ra-crossfit", "ra", "lp"])),
    }
}

/// Merges the config file with flag overrides into the resolved settings.
pub fn resolve(file: ConfigFile, flags: &FlagOverrides) -> Result<RunConfig, ConfigError> {
    let seed = flags.seed.or(file.seed).unwrap_or(0);
    let out = flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("."));
    let threads = flags.threads.or(file.threads).unwrap_or(0);
    let paper_scale = flags.paper_scale || file.paper_scale.unwrap_or(false);

    let mut dgp = DgpConfig::default();
    if let Some(n) = file.dgp.n {
        dgp.n = n;
    }
    if let Some(t) = file.dgp.t {
        dgp.t = t;
    }
    if let Some(g) = file.dgp.gamma {
        dgp.gamma = g;
    }
    if let Some(s) = file.dgp.sigma_eps {
        dgp.sigma_eps = s;
    }
    if let Some(d) = file.dgp.d_y {
        dgp.arfima.d_y = d;
    }
    if let Some(q) = file.dgp.ma_order {
        dgp.arfima.ma_order = q;
    }
    if let Some(b) = file.dgp.burn_in {
        dgp.burn_in = b;
    }
    if let Some(z) = file.dgp.null_effect {
        dgp.null_effect = z;
    }
    dgp.seed = seed;
    dgp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let family_name = flags
        .learner
        .clone()
        .or(file.estimate.learner.clone())
        .unwrap_or_else(|| "forest".into());
    let estimate = EstimateSettings {
        horizons: flags
            .horizons
            .clone()
            .or(file.estimate.horizons)
            .unwrap_or_else(|| vec![0, 1, 3, 5]),
        k_folds: flags.k_folds.or(file.estimate.k_folds).unwrap_or(2),
        gap: flags.gap.or(file.estimate.gap).unwrap_or(20),
        family: parse_family(&family_name)?,
        trees: file
            .estimate
            .trees
            .unwrap_or(if paper_scale { PAPER_TREES } else { DESK_TREES }),
        eta: file.estimate.eta.unwrap_or(tsdml::score::DEFAULT_PROPENSITY_ETA),
        alphas: file.estimate.alphas.unwrap_or_else(|| vec![0.05, 0.01]),
        baselines: flags.baselines || file.estimate.baselines.unwrap_or(false),
        allow_small_gap: flags.allow_small_gap || file.estimate.allow_small_gap.unwrap_or(false),
        tune: file.estimate.tune,
    };
    if estimate.k_folds < 2 {
        return Err(ConfigError::Invalid(format!(
            "k_folds must be at least 2, got {}",
            estimate.k_folds
        )));
    }
    for &a in &estimate.alphas {
        if !(a > 0.0 && a < 1.0) {
            return Err(ConfigError::Invalid(format!("alpha {a} outside (0,1)")));
        }
    }

    let sim_family_name = flags
        .learner
        .clone()
        .or(file.simulate.learner.clone())
        .unwrap_or_else(|| "forest".into());
    let methods = match &file.simulate.methods {
        Some(names) => names
            .iter()
            .map(|n| parse_method(n))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![Method::Dml, Method::CrossFitRa, Method::InSampleRa, Method::Lp],
    };
    let scenario_name = file.simulate.scenario.clone().unwrap_or_else(|| "one-sample".into());
    let simulate_tune = file.simulate.tune.unwrap_or(false);
    let simulate = StudyConfig {
        scenario: parse_scenario(&scenario_name)?,
        dgp: dgp.clone(),
        horizons: flags
            .horizons
            .clone()
            .or(file.simulate.horizons)
            .unwrap_or_else(|| vec![0, 1, 3, 5]),
        t_list: file.simulate.t_list.unwrap_or_else(|| vec![1000, 4000]),
        replications: file.simulate.replications.unwrap_or(DESK_REPLICATIONS).max(1),
        k: flags.k_folds.or(file.simulate.k_folds).unwrap_or(2),
        k_t: flags.gap.or(file.simulate.gap).unwrap_or(20),
        family: parse_family(&sim_family_name)?,
        forest_trees: file
            .simulate
            .trees
            .unwrap_or(if paper_scale { PAPER_TREES } else { DESK_TREES }),
        methods,
        alphas: file.simulate.alphas.unwrap_or_else(|| vec![0.05, 0.01]),
        seed,
        threads,
        tuning: simulate_tune.then(|| {
            if paper_scale {
                TuningProtocol::paper()
            } else {
                TuningProtocol::desk()
            }
        }),
        oracle_draws: file.simulate.oracle_draws.unwrap_or(2_000_000),
        outcome_lags: file
            .simulate
            .outcome_lags
            .unwrap_or(StudyConfig::default().outcome_lags),
    };
    let simulate = if paper_scale {
        StudyConfig {
            replications: file.simulate.replications.unwrap_or(PAPER_REPLICATIONS),
            forest_trees: file.simulate.trees.unwrap_or(PAPER_TREES),
            ..simulate
        }
    } else {
        simulate
    };
    simulate.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    Ok(RunConfig {
        seed,
        out,
        threads,
        paper_scale,
        data: file.data,
        estimate,
        simulate,
        simulate_tune,
        dgp,
        true_irf_horizons: file.true_irf.horizons.unwrap_or_else(|| vec![0, 1, 3, 5]),
        true_irf_draws: file.true_irf.draws.unwrap_or(tsdml::dgp::DEFAULT_ORACLE_DRAWS),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_a_file() {
        let cfg = resolve(ConfigFile::default(), &FlagOverrides::default()).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.estimate.k_folds, 2);
        assert_eq!(cfg.estimate.gap, 20);
        assert_eq!(cfg.simulate.forest_trees, DESK_TREES);
        assert_eq!(cfg.simulate.replications, DESK_REPLICATIONS);
        assert!(!cfg.paper_scale);
    }

    #[test]
    fn paper_scale_restores_published_sizes() {
        let flags = FlagOverrides { paper_scale: true, ..FlagOverrides::default() };
        let cfg = resolve(ConfigFile::default(), &flags).unwrap();
        assert_eq!(cfg.simulate.replications, PAPER_REPLICATIONS);
        assert_eq!(cfg.simulate.forest_trees, PAPER_TREES);
        assert_eq!(cfg.estimate.trees, PAPER_TREES);
    }

    #[test]
    fn flags_override_file_values() {
        let file: ConfigFile =
            toml::from_str("seed = 5\n[estimate]\nk_folds = 4\ngap = 10\n").unwrap();
        let flags = FlagOverrides {
            seed: Some(9),
            gap: Some(30),
            ..FlagOverrides::default()
        };
        let cfg = resolve(file, &flags).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.estimate.k_folds, 4);
        assert_eq!(cfg.estimate.gap, 30);
    }

    #[test]
    fn unknown_names_list_the_valid_values() {
        let file: ConfigFile = toml::from_str("[simulate]\nscenario = \"both\"\n").unwrap();
        let err = resolve(file, &FlagOverrides::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("one-sample") && msg.contains("two-sample"), "{msg}");

        let file: ConfigFile = toml::from_str("[estimate]\nlearner = \"svm\"\n").unwrap();
        let err = resolve(file, &FlagOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("forest"), "{err}");
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("[estimate]\nkfolds = 4\n").is_err());
    }
}
