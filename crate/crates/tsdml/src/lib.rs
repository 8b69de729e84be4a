//! Double machine learning for impulse response functions (IRFs) on a single
//! treated time series.
//!
//! The estimand is the average effect of a discrete treatment at time `t` on
//! the outcome `h` periods later. Estimation combines a doubly robust score
//! (outcome regression plus inverse-propensity correction) with cross-fitting
//! on contiguous sub-sequences separated by a dependence gap, so that flexible
//! nonparametric learners can be used for the nuisance functions without
//! overfitting bias. Inference uses a Bartlett-weighted long-run variance
//! estimator computed per sub-sequence.
//!
//! Module map:
//! - [`panel`]: the observed series and horizon-shifted estimation samples.
//! - [`score`]: the doubly robust influence function and oracle estimator.
//! - [`learners`]: built-in random forests and gradient boosted trees, blocked
//!   cross-validation and grid tuning.
//! - [`crossfit`]: split planning with gaps and the cross-fitted point
//!   estimators.
//! - [`variance`]: long-run variance, automatic bandwidth, confidence bounds.
//! - [`baselines`]: regression adjustment (in-sample and cross-fitted) and
//!   local projections.
//! - [`dgp`]: a synthetic data generator with a known true IRF.
//! - [`mc`]: a Monte Carlo study harness (bias / std / RMSE / coverage).

pub mod baselines;
pub mod crossfit;
pub mod dgp;
pub mod learners;
pub mod mc;
mod numeric;
pub mod panel;
pub mod score;
pub mod variance;

pub use panel::{build_horizon_sample, validate_panel, HorizonSample, Panel};
