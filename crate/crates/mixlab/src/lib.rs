//! A desk-scale laboratory for training on imbalanced multi-domain data.
//!
//! When one domain has orders of magnitude more data than another, two
//! standard remedies exist: resample domains with a temperature (drawing the
//! small ones more often) or keep proportional sampling and upweight the
//! small domains' losses. The two share a population objective but behave
//! differently under stochastic gradients, and this crate provides the
//! machinery to compute, measure, and race them:
//!
//! - [`catalog`] / [`mixture`]: domain catalogs, sampling probabilities
//!   `p(i; tau)`, equivalent loss weights, and the variance factor `F(tau)`.
//! - [`schedule`]: time-indexed sampling plans, from static temperatures to
//!   step cooldowns, linear ramps, and budgeted domain retirement.
//! - [`data`]: synthetic regression mixtures, byte-level corpora, and seeded
//!   batch sampling.
//! - [`model`] / [`train`]: a shared-parameter least-squares model and a
//!   one-hidden-layer byte LM with hand-written gradients, trained by SGD or
//!   Adam with fully deterministic runs.
//! - [`analysis`]: Monte-Carlo gradient statistics, variance-gap curves,
//!   convergence reports, and multi-seed races.
//! - [`harness`]: a TOML experiment config and runners behind the `mixlab`
//!   command-line tool.

pub mod analysis;
pub mod catalog;
pub mod data;
pub mod error;
pub mod harness;
pub mod mixture;
pub mod model;
pub mod schedule;
pub mod seed;
pub mod train;

pub use catalog::{zipf_catalog, Domain, DomainCatalog, ProbVector, WeightVector};
pub use error::{Error, Result};
pub use mixture::{equivalent_weights, f_tau_sweep, temperature_probs, variance_factor};
pub use schedule::{scalarization_plan_of, PlanKind, PlanState, SamplingPlan};
