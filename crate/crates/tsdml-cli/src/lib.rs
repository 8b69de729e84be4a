//! Command-line front end for the estimation library: configuration loading
//! and flag merging, CSV panel ingestion (treatment coding, lag
//! construction), command dispatch, and deterministic result serialization.
//!
//! The binary (`tsdml`) exposes four commands:
//!
//! - `estimate`: impulse responses from a CSV panel, with inference and
//!   optional baseline estimators;
//! - `simulate`: a Monte Carlo study of the estimators on the built-in
//!   data-generating process;
//! - `true-irf`: the process's true effect values;
//! - `tune`: nuisance learner selection, reported without estimating.
//!
//! Everything the commands write — versioned CSV tables and a JSON-lines
//! diagnostics log — is a deterministic function of the configuration and
//! seed, independent of thread count.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod table;
