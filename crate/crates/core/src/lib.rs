//! Doubly robust estimation of counterfactual outcome densities.
//!
//! The counterfactual density `p_a` of `Y^a` is approximated by the member of
//! a parametric family that is closest under an f-divergence, and differences
//! between two counterfactual densities are summarized by an f-divergence
//! effect. Both targets are estimated with cross-fitted one-step estimators
//! built from a propensity score and a conditional outcome density.
//!
//! Module map:
//!
//! * [`data`]: observation tables, CSV loading, quadrature grids, fold plans.
//! * [`distances`]: f-divergence generators and their partial derivatives.
//! * [`models`]: cosine series, exponential family and Gaussian mixture models.
//! * [`nuisance`]: propensity and conditional density learners, cross-fitting.
//! * [`eif`]: influence-function building blocks.
//! * [`projection`]: one-step projection estimator with sandwich inference.
//! * [`effects`]: density effect estimators and confidence intervals.
//! * [`selection`]: cross-validated model selection and linear aggregation.
//! * [`oracle`]: synthetic data generators, ground truth, Monte Carlo runs.
//! * [`cli`]: configuration, reports and the `cfdens` command line.

pub mod cli;
pub mod data;
pub mod distances;
pub mod effects;
pub mod eif;
pub mod error;
mod kdtree;
pub mod models;
pub mod nuisance;
pub mod optim;
pub mod oracle;
pub mod projection;
pub mod selection;

pub use error::{Error, Result};
