//! Closed-form mixture mathematics.
//!
//! Given a catalog of domain sizes `|D_1| .. |D_K|`, temperature sampling
//! draws domain `i` with probability
//!
//! ```text
//! p(i; tau) = |D_i|^(1/tau) / sum_j |D_j|^(1/tau)
//! ```
//!
//! `tau = 1` is proportional sampling; raising `tau` flattens the mixture
//! toward uniform, upsampling small domains. The same tilt can instead be
//! expressed as per-domain loss weights under proportional sampling:
//!
//! ```text
//! w_i = p(i; tau) / p(i; 1)
//! ```
//!
//! which by construction have unit mean under proportional draws, so the two
//! formulations share the same population objective. They differ in second
//! moments. The variance factor
//!
//! ```text
//! F(tau) = sum_i p(i; tau)^2 / p(i; 1) = E[w^2]
//! ```
//!
//! is the expected squared weight under proportional sampling. By
//! Cauchy-Schwarz `F(tau) >= 1`, with equality exactly at `tau = 1` or for a
//! uniform catalog, and `F` is non-decreasing in `tau` on `tau >= 1`. It
//! governs how much extra gradient variance the weighted (scalarized)
//! formulation pays relative to the resampled one.
//!
//! All computations run in double precision through the log domain, so
//! catalogs whose sizes span many orders of magnitude (billions of tokens
//! next to thousands) stay finite at any temperature.

use crate::catalog::{DomainCatalog, ProbVector, WeightVector};
use crate::error::{Error, Result};

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(())
}

/// Log-probabilities `ln p(i; tau)`, normalized with the max-subtraction
/// trick so `|D_i|^(1/tau)` never overflows or underflows en masse.
pub(crate) fn log_temperature_probs(catalog: &DomainCatalog, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if catalog.is_empty() {
        return Err(Error::invalid("catalog must contain at least one domain"));
    }
    let logits: Vec<f64> = catalog
        .domains()
        .iter()
        .map(|d| (d.size as f64).ln() / tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    Ok(logits.into_iter().map(|l| l - log_norm).collect())
}

/// Sampling probabilities `p(i; tau)` for the catalog.
///
/// `tau = 1` gives exact proportional shares; equal sizes give the uniform
/// vector at every temperature.
pub fn temperature_probs(catalog: &DomainCatalog, tau: f64) -> Result<ProbVector> {
    let log_p = log_temperature_probs(catalog, tau)?;
    ProbVector::new(log_p.into_iter().map(f64::exp).collect())
}

/// The equivalent scalarization weights `w_i = p(i; tau) / p(i; 1)`.
///
/// Multiplying per-example losses by `w_{f(x)}` under proportional sampling
/// reproduces the temperature-sampled population objective; the returned
/// vector satisfies the unit-mean invariant `sum_i p(i;1) w_i = 1`.
pub fn equivalent_weights(catalog: &DomainCatalog, tau: f64) -> Result<WeightVector> {
    let log_p_tau = log_temperature_probs(catalog, tau)?;
    let log_p_one = log_temperature_probs(catalog, 1.0)?;
    let w: Vec<f64> = log_p_tau
        .iter()
        .zip(&log_p_one)
        .map(|(&lt, &lo)| (lt - lo).exp())
        .collect();
    Ok(WeightVector::from_raw(w))
}

/// The variance factor `F(tau) = sum_i p(i; tau)^2 / p(i; 1)`.
///
/// Equals `E[w^2]` for the equivalent weights under proportional sampling.
/// Always `>= 1`; equals 1 at `tau = 1` and for uniform catalogs at any
/// temperature.
pub fn variance_factor(catalog: &DomainCatalog, tau: f64) -> Result<f64> {
    let log_p_tau = log_temperature_probs(catalog, tau)?;
    let log_p_one = log_temperature_probs(catalog, 1.0)?;
    // log-sum-exp of (2 ln p_tau - ln p_1), stable even when a tiny domain's
    // proportional share underflows an ordinary division.
    let terms: Vec<f64> = log_p_tau
        .iter()
        .zip(&log_p_one)
        .map(|(&lt, &lo)| 2.0 * lt - lo)
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(terms.iter().map(|&t| (t - max).exp()).sum::<f64>() * max.exp())
}

/// Evaluate `F` over a temperature grid, returning `(tau, F(tau))` pairs.
///
/// On a grid restricted to `tau >= 1` the values are non-decreasing.
pub fn f_tau_sweep(catalog: &DomainCatalog, tau_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if tau_grid.is_empty() {
        return Err(Error::invalid("temperature grid must be non-empty"));
    }
    tau_grid
        .iter()
        .map(|&tau| Ok((tau, variance_factor(catalog, tau)?)))
        .collect()
}
