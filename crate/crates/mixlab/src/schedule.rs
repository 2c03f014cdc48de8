//! Time-indexed sampling plans.
//!
//! A [`SamplingPlan`] maps a training step to per-domain sampling
//! probabilities and per-domain loss weights. Static temperatures, step
//! schedules (high temperature early, proportional later), dense linear
//! schedules, budgeted domain retirement ([`PlanKind::Unimax`]) and late
//! introduction of small domains ([`PlanKind::OrderMatters`]) all fit this
//! shape, so a training loop only ever talks to `plan_at`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::catalog::{DomainCatalog, ProbVector, WeightVector};
use crate::error::{Error, Result};
use crate::mixture::{equivalent_weights, temperature_probs};

/// The rule family of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanKind {
    /// One temperature for the whole run.
    Static { tau: f64 },
    /// Piecewise-constant temperature segments `(start_step, tau)`.
    /// A segment takes effect *at* its start step.
    StepSchedule { segments: Vec<(u64, f64)> },
    /// Temperature interpolated linearly in the step from `tau_start` to
    /// `tau_end` over `total_steps`; clamps to `tau_end` afterwards.
    LinearDense {
        tau_start: f64,
        tau_end: f64,
        total_steps: u64,
    },
    /// Uniform sampling over active domains; a domain retires once its
    /// cumulative drawn examples reach `epoch_budget * size`. The largest
    /// domain never retires, so the mixture can never empty.
    Unimax { epoch_budget: f64 },
    /// Proportional sampling restricted to `high_set` (1-based domain ids)
    /// before `intro_step`, then temperature `post_tau` over all domains.
    OrderMatters {
        high_set: BTreeSet<usize>,
        intro_step: u64,
        post_tau: f64,
    },
    /// The scalarization twin of a temperature-based plan: proportional
    /// probabilities with the equivalent weights of the inner plan's
    /// temperature at each step.
    Scalarized { inner: Box<PlanKind> },
}

/// A plan bound to its catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    catalog: DomainCatalog,
    kind: PlanKind,
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(())
}

fn validate_kind(kind: &PlanKind, catalog: &DomainCatalog) -> Result<()> {
    match kind {
        PlanKind::Static { tau } => check_tau(*tau),
        PlanKind::StepSchedule { segments } => {
            if segments.is_empty() {
                return Err(Error::invalid("step schedule needs at least one segment"));
            }
            if segments[0].0 != 0 {
                return Err(Error::invalid("first segment must start at step 0"));
            }
            for pair in segments.windows(2) {
                if pair[1].0 <= pair[0].0 {
                    return Err(Error::invalid("segment starts must be strictly increasing"));
                }
            }
            for &(_, tau) in segments {
                check_tau(tau)?;
            }
            Ok(())
        }
        PlanKind::LinearDense {
            tau_start,
            tau_end,
            total_steps,
        } => {
            check_tau(*tau_start)?;
            check_tau(*tau_end)?;
            if *total_steps == 0 {
                return Err(Error::invalid("linear schedule needs total_steps >= 1"));
            }
            Ok(())
        }
        PlanKind::Unimax { epoch_budget } => {
            if !epoch_budget.is_finite() || *epoch_budget <= 0.0 {
                return Err(Error::invalid("unimax epoch budget must be > 0"));
            }
            Ok(())
        }
        PlanKind::OrderMatters {
            high_set,
            post_tau,
            ..
        } => {
            check_tau(*post_tau)?;
            if high_set.is_empty() {
                return Err(Error::invalid("order-matters high set must be non-empty"));
            }
            if high_set.len() >= catalog.len() {
                return Err(Error::invalid(
                    "order-matters high set must be a strict subset of the domains",
                ));
            }
            for &id in high_set {
                if id == 0 || id > catalog.len() {
                    return Err(Error::invalid(format!("unknown domain id {id} in high set")));
                }
            }
            Ok(())
        }
        PlanKind::Scalarized { inner } => {
            if !matches!(
                **inner,
                PlanKind::Static { .. } | PlanKind::StepSchedule { .. } | PlanKind::LinearDense { .. }
            ) {
                return Err(Error::UnsupportedPlan(
                    "scalarized plans must wrap a temperature-based plan".into(),
                ));
            }
            validate_kind(inner, catalog)
        }
    }
}

impl SamplingPlan {
    pub fn new(catalog: DomainCatalog, kind: PlanKind) -> Result<Self> {
        validate_kind(&kind, &catalog)?;
        Ok(Self { catalog, kind })
    }

    pub fn catalog(&self) -> &DomainCatalog {
        &self.catalog
    }

    pub fn kind(&self) -> &PlanKind {
        &self.kind
    }

    /// Is this a pure temperature plan (convertible to a scalarization twin)?
    pub fn is_temperature_based(&self) -> bool {
        matches!(
            self.kind,
            PlanKind::Static { .. } | PlanKind::StepSchedule { .. } | PlanKind::LinearDense { .. }
        )
    }

    /// The temperature in force at `step`, if the plan is temperature-based.
    ///
    /// Returns `None` for `Unimax` and `OrderMatters`, which are probability
    /// plans without a single governing temperature. A scalarized twin
    /// reports the temperature it approximates.
    pub fn effective_tau(&self, step: u64) -> Option<f64> {
        match &self.kind {
            PlanKind::Static { tau } => Some(*tau),
            PlanKind::StepSchedule { segments } => {
                let mut tau = segments[0].1;
                for &(start, t) in segments {
                    if step >= start {
                        tau = t;
                    } else {
                        break;
                    }
                }
                Some(tau)
            }
            PlanKind::LinearDense {
                tau_start,
                tau_end,
                total_steps,
            } => {
                let frac = (step.min(*total_steps)) as f64 / *total_steps as f64;
                Some(tau_start + (tau_end - tau_start) * frac)
            }
            PlanKind::Unimax { .. } | PlanKind::OrderMatters { .. } => None,
            PlanKind::Scalarized { inner } => {
                let shadow = SamplingPlan {
                    catalog: self.catalog.clone(),
                    kind: (**inner).clone(),
                };
                shadow.effective_tau(step)
            }
        }
    }

    /// The `(probabilities, weights)` pair in force for the given state.
    ///
    /// Temperature-based plans emit tilted probabilities with unit weights;
    /// their scalarized twins emit proportional probabilities with the
    /// equivalent weights. `Unimax` emits uniform probabilities over active
    /// domains; `OrderMatters` restricts proportional sampling to its high
    /// set before the intro step.
    pub fn plan_at(&self, state: &PlanState) -> Result<(ProbVector, WeightVector)> {
        let k = self.catalog.len();
        if state.drawn.len() != k {
            return Err(Error::invalid("plan state does not match catalog size"));
        }
        match &self.kind {
            PlanKind::Static { .. } | PlanKind::StepSchedule { .. } | PlanKind::LinearDense { .. } => {
                let tau = self
                    .effective_tau(state.step)
                    .expect("temperature-based plan");
                Ok((temperature_probs(&self.catalog, tau)?, WeightVector::ones(k)))
            }
            PlanKind::Unimax { .. } => {
                let active = state.active.iter().filter(|&&a| a).count();
                debug_assert!(active > 0, "largest domain never retires");
                let p = state
                    .active
                    .iter()
                    .map(|&a| if a { 1.0 / active as f64 } else { 0.0 })
                    .collect();
                Ok((ProbVector::new(p)?, WeightVector::ones(k)))
            }
            PlanKind::OrderMatters {
                high_set,
                intro_step,
                post_tau,
            } => {
                if state.step >= *intro_step {
                    Ok((
                        temperature_probs(&self.catalog, *post_tau)?,
                        WeightVector::ones(k),
                    ))
                } else {
                    let total: u64 = self
                        .catalog
                        .domains()
                        .iter()
                        .filter(|d| high_set.contains(&d.id))
                        .map(|d| d.size)
                        .sum();
                    let p = self
                        .catalog
                        .domains()
                        .iter()
                        .map(|d| {
                            if high_set.contains(&d.id) {
                                d.size as f64 / total as f64
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    Ok((ProbVector::new(p)?, WeightVector::ones(k)))
                }
            }
            PlanKind::Scalarized { inner } => {
                let shadow = SamplingPlan {
                    catalog: self.catalog.clone(),
                    kind: (**inner).clone(),
                };
                let tau = shadow.effective_tau(state.step).expect("validated inner");
                Ok((
                    temperature_probs(&self.catalog, 1.0)?,
                    equivalent_weights(&self.catalog, tau)?,
                ))
            }
        }
    }
}

/// Convert a temperature-based plan into its scalarization twin.
///
/// The twin samples proportionally and carries the equivalent weights
/// `w_i = p(i; tau_step) / p(i; 1)` at every step, so elementwise
/// `probs_twin * weights_twin` equals the original plan's probabilities.
/// `Unimax` and `OrderMatters` have no canonical weight twin and are
/// rejected.
pub fn scalarization_plan_of(plan: &SamplingPlan) -> Result<SamplingPlan> {
    if !plan.is_temperature_based() {
        return Err(Error::UnsupportedPlan(format!(
            "no scalarization twin for {:?}",
            plan_kind_name(&plan.kind)
        )));
    }
    SamplingPlan::new(
        plan.catalog.clone(),
        PlanKind::Scalarized {
            inner: Box::new(plan.kind.clone()),
        },
    )
}

fn plan_kind_name(kind: &PlanKind) -> &'static str {
    match kind {
        PlanKind::Static { .. } => "static",
        PlanKind::StepSchedule { .. } => "step-schedule",
        PlanKind::LinearDense { .. } => "linear",
        PlanKind::Unimax { .. } => "unimax",
        PlanKind::OrderMatters { .. } => "order-matters",
        PlanKind::Scalarized { .. } => "scalarized",
    }
}

/// Mutable per-run state a plan is consulted against.
///
/// Owned by a single training loop. Cumulative draw counts never decrease
/// and retired domains stay retired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanState {
    step: u64,
    drawn: Vec<u64>,
    active: Vec<bool>,
}

impl PlanState {
    pub fn new(num_domains: usize) -> Self {
        Self {
            step: 0,
            drawn: vec![0; num_domains],
            active: vec![true; num_domains],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn drawn(&self) -> &[u64] {
        &self.drawn
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    /// Record one completed step that drew `counts[i]` examples from each
    /// domain, then apply the plan's retirement rule.
    pub fn record_batch(&mut self, plan: &SamplingPlan, counts: &[u64]) {
        assert_eq!(counts.len(), self.drawn.len(), "count length mismatch");
        for (d, &c) in self.drawn.iter_mut().zip(counts) {
            *d += c;
        }
        self.step += 1;
        if let PlanKind::Unimax { epoch_budget } = plan.kind {
            let exempt = plan.catalog.largest();
            for (i, d) in plan.catalog.domains().iter().enumerate() {
                if i != exempt && self.drawn[i] as f64 >= epoch_budget * d.size as f64 {
                    self.active[i] = false;
                }
            }
        }
    }
}
