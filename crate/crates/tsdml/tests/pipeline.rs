//! End-to-end pipeline properties on drawn series: reductions between
//! estimator variants that must hold exactly, and bit-level reproducibility
//! of a study at any parallelism.

use approx::assert_relative_eq;
use tsdml::baselines::regression_adjustment_from_values;
use tsdml::build_horizon_sample;
use tsdml::crossfit::{
    dml_estimate, dml_estimate_two_samples, make_split_plan, GapSide, ModelSpec, NuisanceConfig,
};
use tsdml::dgp::{gen_panel, oracle_nuisances, DgpConfig};
use tsdml::learners::ForestSpec;
use tsdml::mc::{run_study, Method, StudyConfig};
use tsdml::variance::{estimate_with_inference, BandwidthRule};

fn forest_cfg(trees: usize, seed: u64) -> NuisanceConfig {
    NuisanceConfig {
        mu1: ModelSpec::Forest(ForestSpec { n_trees: trees, ..ForestSpec::regression() }),
        mu0: ModelSpec::Forest(ForestSpec { n_trees: trees, ..ForestSpec::regression() }),
        e: ModelSpec::Forest(ForestSpec { n_trees: trees, ..ForestSpec::classification() }),
        seed,
        ..NuisanceConfig::default()
    }
}

/// A symmetric two-fold split with a full gap must reproduce the two-sample
/// estimator run on the retained blocks, down to the last bit of the
/// inference, on a series drawn from the simulated process with real forest
/// fits.
#[test]
fn gapped_split_equals_two_independent_samples_on_a_drawn_series() {
    let panel = gen_panel(&DgpConfig { t: 400, seed: 2024, ..DgpConfig::default() }).unwrap();
    let sample = build_horizon_sample(&panel, 1).unwrap();
    let plan = make_split_plan(sample.len(), 2, 20, GapSide::Both).unwrap();
    let cfg = forest_cfg(20, 77);

    let one = dml_estimate(&sample, &plan, &cfg).unwrap();
    let folds = plan.folds();
    let s1 = sample.slice(folds[0].eval.clone());
    let s2 = sample.slice(folds[1].eval.clone());
    let two = dml_estimate_two_samples(&s1, &s2, &cfg).unwrap();

    assert_eq!(one.theta.to_bits(), two.theta.to_bits());
    assert_eq!(one.effective_count, two.effective_count);
    for (a, b) in one.folds.iter().zip(&two.folds) {
        assert_eq!(a.residuals.len(), b.residuals.len());
        for (ra, rb) in a.residuals.iter().zip(&b.residuals) {
            assert_eq!(ra.to_bits(), rb.to_bits());
        }
    }
    let inf_one = estimate_with_inference(&one, BandwidthRule::Auto, &[0.05]).unwrap();
    let inf_two = estimate_with_inference(&two, BandwidthRule::Auto, &[0.05]).unwrap();
    assert_eq!(inf_one.variance.to_bits(), inf_two.variance.to_bits());
    assert_eq!(inf_one.std_error.to_bits(), inf_two.std_error.to_bits());
    assert_eq!(inf_one.bandwidths, inf_two.bandwidths);
}

/// The same study configuration must produce bit-identical results whether
/// it runs on one worker thread or several.
#[test]
fn study_results_are_identical_at_any_parallelism() {
    let cfg = StudyConfig {
        t_list: vec![160],
        replications: 3,
        horizons: vec![0, 1],
        forest_trees: 8,
        k_t: 8,
        methods: vec![Method::Dml, Method::CrossFitRa, Method::InSampleRa, Method::Lp],
        alphas: vec![0.05],
        oracle_draws: 50_000,
        ..StudyConfig::default()
    };
    let run_in_pool = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_study(&cfg).unwrap())
    };
    let a = run_in_pool(1);
    let b = run_in_pool(4);

    assert_eq!(a.raw.len(), b.raw.len());
    for (ra, rb) in a.raw.iter().zip(&b.raw) {
        assert_eq!((ra.method, ra.t, ra.h, ra.rep), (rb.method, rb.t, rb.h, rb.rep));
        assert_eq!(ra.theta.to_bits(), rb.theta.to_bits());
        assert_eq!(ra.std_error.to_bits(), rb.std_error.to_bits());
        for (ia, ib) in ra.intervals.iter().zip(&rb.intervals) {
            assert_eq!(ia.lo.to_bits(), ib.lo.to_bits());
            assert_eq!(ia.hi.to_bits(), ib.hi.to_bits());
        }
    }
    assert_eq!(a.cells.len(), b.cells.len());
    for (ca, cb) in a.cells.iter().zip(&b.cells) {
        assert_eq!(ca.bias.to_bits(), cb.bias.to_bits());
        assert_eq!(ca.rmse.to_bits(), cb.rmse.to_bits());
    }
}

/// Cross-fitted regression adjustment evaluated at known outcome models is
/// exactly the mean outcome contrast over the evaluated indices — the
/// oracle version of the estimator.
#[test]
fn crossfit_ra_with_known_outcome_models_is_the_oracle_contrast_mean() {
    let dgp = DgpConfig { t: 2000, seed: 5, ..DgpConfig::default() };
    let panel = gen_panel(&dgp).unwrap();
    let sample = build_horizon_sample(&panel, 0).unwrap();
    let values = oracle_nuisances(&sample, dgp.gamma);
    let plan = make_split_plan(sample.len(), 2, 20, GapSide::Both).unwrap();

    let ra = regression_adjustment_from_values(
        &sample,
        Some(&plan),
        &values,
        BandwidthRule::Auto,
        &[0.05],
    )
    .unwrap();

    let mut acc = 0.0;
    let mut n = 0usize;
    for fold in plan.folds() {
        for t in fold.eval.clone() {
            acc += values[t].mu1 - values[t].mu0;
            n += 1;
        }
    }
    assert_relative_eq!(ra.estimate.theta, acc / n as f64, epsilon = 1e-12);
    assert_eq!(ra.estimate.effective_count, n);
}
