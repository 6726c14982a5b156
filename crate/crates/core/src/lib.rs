//! Causal algorithmic recourse over structural causal models.
//!
//! The crate is organised bottom-up:
//!
//! - [`scm`]: structural causal models, abduction, interventions, counterfactuals, twins.
//! - [`metric`]: pseudometrics, product metrics, perturbation balls and counterfactual
//!   perturbation sets.
//! - [`classifier`]: linear decision models, training, ground-truth label rules.
//! - [`recourse`]: closed-form recourse for linear SCMs with linear classifiers, robust,
//!   adversarially fair robust (AFRR) and FARO recourse, and a brute-force grid solver.
//! - [`fairness`]: individual and relative fairness metrics over recourse costs.
//! - [`datasets`]: built-in SCMs (`lin`, `anm`, `loan`), dataset generation and CSV I/O.
//! - [`experiment`]: the configurable simulation harness and single-instance reports.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::redundant_guards,
    clippy::needless_range_loop
)]

pub mod classifier;
pub mod datasets;
mod error;
pub mod experiment;
pub mod fairness;
pub mod metric;
pub mod recourse;
pub mod scm;

pub use error::{CsvError, Error, Result};

/// Absolute tolerance used by every "equals" contract on exact closed forms.
pub const TOLERANCE: f64 = 1e-9;
