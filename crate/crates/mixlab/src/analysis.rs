//! Statistical verification tools: Monte-Carlo gradient statistics,
//! variance-gap curves, convergence reports, and multi-seed races.
//!
//! The central quantity is the spread of minibatch gradients at a frozen
//! model. Two scalarizations are tracked: the variance of gradient *norms*
//! between minibatches, and the trace of the per-coordinate covariance
//! (which the second-moment theory speaks to directly). Estimation uses
//! Welford accumulators, so a degenerate sampler whose draws are bitwise
//! identical reports a variance of exactly zero.

use serde::{Deserialize, Serialize};

use crate::catalog::{ProbVector, WeightVector};
use crate::data::{sample_batch, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::seeded_rng;
use crate::train::{train, RunRecord, TrainConfig};
use crate::mixture::{equivalent_weights, temperature_probs};

/// One-pass mean/variance accumulator.
#[derive(Debug, Clone, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Moments of a sample of minibatch gradients at a frozen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    /// Number of independent minibatch gradients drawn.
    pub n: usize,
    /// Mean gradient, coordinate by coordinate.
    pub mean: Vec<f64>,
    /// Variance of the gradient norms between minibatches.
    pub norm_variance: f64,
    /// Per-coordinate sample variances; their sum is the covariance trace.
    pub coord_variance: Vec<f64>,
    /// Mean of the squared gradient norms.
    pub norm_sq_mean: f64,
    /// Variance of the squared gradient norms (for standard errors of the
    /// trace estimate).
    pub norm_sq_variance: f64,
}

impl GradientStats {
    /// Trace of the per-coordinate covariance.
    pub fn variance_trace(&self) -> f64 {
        self.coord_variance.iter().sum()
    }

    /// Standard error of [`variance_trace`](Self::variance_trace) under the
    /// large-sample approximation.
    pub fn trace_std_error(&self) -> f64 {
        (self.norm_sq_variance / self.n as f64).sqrt()
    }

    /// Per-coordinate standard errors of the mean gradient.
    pub fn mean_std_errors(&self) -> Vec<f64> {
        self.coord_variance
            .iter()
            .map(|v| (v / self.n as f64).sqrt())
            .collect()
    }
}

/// Draw `n_samples` independent minibatch gradients of size `batch_size`
/// under `(probs, weights)` at the frozen `model` and summarize their
/// moments. The mean is an unbiased estimate of the full mixture gradient.
pub fn grad_variance(
    model: &Model,
    data: &MultiDomainDataset,
    probs: &ProbVector,
    weights: &WeightVector,
    n_samples: usize,
    batch_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<GradientStats> {
    if n_samples < 2 {
        return Err(Error::invalid("variance estimation needs n_samples >= 2"));
    }
    let p = model.param_count();
    let mut coord = vec![Welford::default(); p];
    let mut norms = Welford::default();
    let mut norm_sq = Welford::default();
    let mut grad = vec![0.0; p];
    for _ in 0..n_samples {
        let batch = sample_batch(data, probs, weights, batch_size, rng)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (_, ex, w) in batch.resolve(data) {
            model.accumulate_loss_and_grad(ex, w, &mut grad);
        }
        let inv_b = 1.0 / batch_size as f64;
        let mut sq = 0.0;
        for (acc, g) in coord.iter_mut().zip(grad.iter_mut()) {
            *g *= inv_b;
            acc.push(*g);
            sq += *g * *g;
        }
        norms.push(sq.sqrt());
        norm_sq.push(sq);
    }
    Ok(GradientStats {
        n: n_samples,
        mean: coord.iter().map(|w| w.mean).collect(),
        norm_variance: norms.variance(),
        coord_variance: coord.iter().map(|w| w.variance()).collect(),
        norm_sq_mean: norm_sq.mean,
        norm_sq_variance: norm_sq.variance(),
    })
}

/// One row of a variance-gap curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub tau: f64,
    /// Norm-variance under scalarization (proportional draws, equivalent
    /// weights).
    pub var_s: f64,
    /// Norm-variance under temperature sampling.
    pub var_ts: f64,
    pub gap: f64,
    /// Covariance traces for the same two estimators.
    pub trace_s: f64,
    pub trace_ts: f64,
    pub trace_gap: f64,
    pub trace_se_pooled: f64,
}

/// Estimate scalarization and temperature-sampling gradient variances over
/// a temperature grid at a frozen model, with shared random seeds per
/// temperature so the two estimates are directly comparable.
pub fn variance_gap_curve(
    model: &Model,
    data: &MultiDomainDataset,
    tau_grid: &[f64],
    n_samples: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<GapPoint>> {
    let catalog = data.catalog();
    let p_one = temperature_probs(&catalog, 1.0)?;
    let ones = WeightVector::ones(catalog.len());
    tau_grid
        .iter()
        .enumerate()
        .map(|(idx, &tau)| {
            let p_tau = temperature_probs(&catalog, tau)?;
            let w_tau = equivalent_weights(&catalog, tau)?;
            let mut rng_ts = seeded_rng(seed, "gradvar", idx as u64);
            let mut rng_s = seeded_rng(seed, "gradvar", idx as u64);
            let ts = grad_variance(model, data, &p_tau, &ones, n_samples, batch_size, &mut rng_ts)?;
            let s = grad_variance(model, data, &p_one, &w_tau, n_samples, batch_size, &mut rng_s)?;
            let se = (s.trace_std_error().powi(2) + ts.trace_std_error().powi(2)).sqrt();
            Ok(GapPoint {
                tau,
                var_s: s.norm_variance,
                var_ts: ts.norm_variance,
                gap: s.norm_variance - ts.norm_variance,
                trace_s: s.variance_trace(),
                trace_ts: ts.variance_trace(),
                trace_gap: s.variance_trace() - ts.variance_trace(),
                trace_se_pooled: se,
            })
        })
        .collect()
}

/// Variance of the logged minibatch gradient norms over a sliding window of
/// a finished run, for plots of gradient noise along training.
pub fn grad_norm_variance_windows(record: &RunRecord, window: usize) -> Vec<(u64, f64)> {
    if window < 2 || record.rows.len() < window {
        return Vec::new();
    }
    record
        .rows
        .windows(window)
        .map(|rows| {
            let mut acc = Welford::default();
            for r in rows {
                acc.push(r.grad_norm);
            }
            (rows[window - 1].step, acc.variance())
        })
        .collect()
}

/// Per-domain convergence summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConvergence {
    pub domain: String,
    /// First eval step whose validation loss is at or below the threshold.
    pub steps_to_threshold: Option<u64>,
    pub min_valid_loss: f64,
    pub min_step: u64,
    pub final_valid_loss: f64,
    /// `final - min` validation loss; non-negative by construction.
    pub overfit_gap: f64,
}

/// Convergence summary across domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub domains: Vec<DomainConvergence>,
    pub diverged: bool,
}

/// Summarize a run against per-domain validation-loss thresholds.
pub fn convergence_report(record: &RunRecord, thresholds: &[f64]) -> Result<ConvergenceReport> {
    let k = record.domain_names.len();
    if thresholds.len() != k {
        return Err(Error::invalid("one threshold per domain required"));
    }
    let domains = (0..k)
        .map(|i| {
            let mut steps_to_threshold = None;
            let mut min_valid = f64::INFINITY;
            let mut min_step = 0;
            let mut final_valid = f64::NAN;
            for row in &record.rows {
                let v = row.valid_loss[i];
                if steps_to_threshold.is_none() && v <= thresholds[i] {
                    steps_to_threshold = Some(row.step);
                }
                if v < min_valid {
                    min_valid = v;
                    min_step = row.step;
                }
                final_valid = v;
            }
            DomainConvergence {
                domain: record.domain_names[i].clone(),
                steps_to_threshold,
                min_valid_loss: min_valid,
                min_step,
                final_valid_loss: final_valid,
                overfit_gap: (final_valid - min_valid).max(0.0),
            }
        })
        .collect();
    Ok(ConvergenceReport {
        domains,
        diverged: record.diverged(),
    })
}

/// A named arm of a race: a plan/mode combination on the shared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceArm {
    pub name: String,
    pub config: TrainConfig,
}

/// Aggregated race results for one (arm, domain) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceCell {
    pub arm: String,
    pub domain: String,
    /// Median of steps-to-threshold across seeds; `None` if the median run
    /// never crossed.
    pub median_steps: Option<u64>,
    /// Seeds where this arm strictly beat every other arm on this domain.
    pub wins: u32,
    /// Per-seed steps-to-threshold, in seed order.
    pub per_seed: Vec<Option<u64>>,
}

/// Full race output: the table plus per-arm divergence counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceTable {
    pub cells: Vec<RaceCell>,
    pub diverged_runs: u32,
}

fn median_steps(mut xs: Vec<Option<u64>>) -> Option<u64> {
    // None sorts last (treated as "never"); lower median for even counts.
    xs.sort_by_key(|x| x.unwrap_or(u64::MAX));
    xs[(xs.len() - 1) / 2]
}

/// Run every arm on every seed, summarize steps-to-threshold per domain.
///
/// Arms share the dataset and (for identical model specs) the initial
/// parameters for a given seed; batch streams are arm-specific. A diverged
/// run counts as a non-finisher on every domain.
pub fn race(
    arms: &[RaceArm],
    data: &MultiDomainDataset,
    thresholds: &[f64],
    seeds: &[u64],
) -> Result<RaceTable> {
    if arms.len() < 2 {
        return Err(Error::invalid("a race needs at least two arms"));
    }
    if seeds.len() < 2 {
        return Err(Error::invalid("a race needs at least two seeds"));
    }
    if arms.iter().any(|a| a.config.model != arms[0].config.model) {
        return Err(Error::invalid("race arms must share one model spec"));
    }
    let k = data.num_domains();
    // steps[arm][seed][domain]
    let mut steps: Vec<Vec<Vec<Option<u64>>>> = vec![Vec::new(); arms.len()];
    let mut diverged_runs = 0;
    for &seed in seeds {
        for (a, arm) in arms.iter().enumerate() {
            let mut config = arm.config.clone();
            config.seed = seed;
            config.arm_index = a as u64;
            let record = train(&config, data)?;
            if record.diverged() {
                diverged_runs += 1;
                steps[a].push(vec![None; k]);
                continue;
            }
            let report = convergence_report(&record, thresholds)?;
            steps[a].push(report.domains.iter().map(|d| d.steps_to_threshold).collect());
        }
    }

    let arm_names: Vec<String> = arms.iter().map(|a| a.name.clone()).collect();
    let domain_names: Vec<String> = data.names().iter().map(|s| s.to_string()).collect();
    Ok(RaceTable {
        cells: aggregate_race_cells(&arm_names, &domain_names, &steps, seeds.len()),
        diverged_runs,
    })
}

/// Fold a `steps[arm][seed][domain]` matrix into per-(arm, domain) cells
/// with medians and strict-win counts.
#[allow(clippy::needless_range_loop)]
pub fn aggregate_race_cells(
    arm_names: &[String],
    domain_names: &[String],
    steps: &[Vec<Vec<Option<u64>>>],
    num_seeds: usize,
) -> Vec<RaceCell> {
    let mut cells = Vec::new();
    for (a, arm) in arm_names.iter().enumerate() {
        for (d, domain) in domain_names.iter().enumerate() {
            let per_seed: Vec<Option<u64>> = (0..num_seeds).map(|s| steps[a][s][d]).collect();
            let mut wins = 0;
            for s in 0..num_seeds {
                let mine = steps[a][s][d].unwrap_or(u64::MAX);
                let beat_all = (0..arm_names.len())
                    .filter(|&other| other != a)
                    .all(|other| mine < steps[other][s][d].unwrap_or(u64::MAX));
                if beat_all && steps[a][s][d].is_some() {
                    wins += 1;
                }
            }
            cells.push(RaceCell {
                arm: arm.clone(),
                domain: domain.clone(),
                median_steps: median_steps(per_seed.clone()),
                wins,
                per_seed,
            });
        }
    }
    cells
}

/// Default race thresholds for a synthetic task: `(1 + margin)` times the
/// validation loss of the generating parameters, the intrinsic noise floor
/// of each domain's validation split.
pub fn noise_floor_thresholds(
    data: &MultiDomainDataset,
    true_params: &[Vec<f64>],
    margin: f64,
) -> Result<Vec<f64>> {
    if true_params.len() != data.num_domains() {
        return Err(Error::invalid("one parameter vector per domain required"));
    }
    let dim = data.example_shape();
    data.domains()
        .iter()
        .zip(true_params)
        .map(|(d, theta)| {
            if theta.len() != dim {
                return Err(Error::invalid("parameter dimension mismatch"));
            }
            let model = Model::from_params(
                crate::model::ModelSpec::SharedLinear { dim },
                theta.clone(),
            )?;
            let n = d.valid.len();
            let mut acc = 0.0;
            for i in 0..n {
                acc += model.loss(d.valid.example(i));
            }
            Ok(((acc / n as f64) * (1.0 + margin)).max(1e-12))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, DomainData, ExampleStore, SyntheticTaskSpec};
    use crate::model::{full_gradient, ModelSpec};
    use crate::schedule::{PlanKind, SamplingPlan};
    use crate::train::{EvalRow, OptimizerSpec, TrainMode};
    use crate::data::BatchMode;

    /// A dataset whose per-example gradients are all identical at any model
    /// point: every example is the same `(x0, y0)` pair, replicated to the
    /// requested domain sizes.
    pub(crate) fn constant_dataset(sizes: &[usize], x0: &[f64], y0: f64) -> MultiDomainDataset {
        let dim = x0.len();
        let domains = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut features = Vec::with_capacity(n * dim);
                let mut targets = Vec::with_capacity(n);
                for _ in 0..n {
                    features.extend_from_slice(x0);
                    targets.push(y0);
                }
                DomainData {
                    name: format!("d{}", i + 1),
                    train: ExampleStore::Regression {
                        dim,
                        features: features.clone(),
                        targets: targets.clone(),
                    },
                    valid: ExampleStore::Regression { dim, features, targets },
                }
            })
            .collect();
        MultiDomainDataset::new(domains).unwrap()
    }

    #[test]
    fn ts_variance_is_exactly_zero_on_constant_gradients() {
        let ds = constant_dataset(&[900, 100], &[1.0, -2.0], 3.0);
        let catalog = ds.catalog();
        let model = Model::shared_linear(2);
        let probs = temperature_probs(&catalog, 2.0).unwrap();
        let ones = WeightVector::ones(2);
        let mut rng = seeded_rng(0, "ts0", 0);
        let stats = grad_variance(&model, &ds, &probs, &ones, 5000, 1, &mut rng).unwrap();
        assert_eq!(stats.norm_variance, 0.0);
        assert_eq!(stats.variance_trace(), 0.0);
    }

    #[test]
    fn scalarized_variance_matches_analytic_factor() {
        // With all gradients equal to g and batch size 1, scalarization's
        // covariance trace is (F(tau) - 1) ||g||^2.
        let ds = constant_dataset(&[900, 100], &[1.0, -2.0], 3.0);
        let catalog = ds.catalog();
        let model = Model::shared_linear(2);
        let p_one = temperature_probs(&catalog, 1.0).unwrap();
        let w = equivalent_weights(&catalog, 2.0).unwrap();
        let g = full_gradient(&model, &ds, &p_one, &WeightVector::ones(2)).unwrap();
        let g_sq: f64 = g.iter().map(|x| x * x).sum();
        let mut rng = seeded_rng(5, "s-var", 0);
        let stats = grad_variance(&model, &ds, &p_one, &w, 200_000, 1, &mut rng).unwrap();
        let expected = (1.25 - 1.0) * g_sq;
        let got = stats.variance_trace();
        assert!(
            (got - expected).abs() < 0.05 * expected,
            "trace {got} vs analytic {expected}"
        );
    }

    #[test]
    fn mean_gradient_is_unbiased() {
        let spec = SyntheticTaskSpec {
            feature_dim: 3,
            train_sizes: vec![80, 20],
            theta_shared: vec![1.0, -0.5, 0.2],
            domain_deltas: vec![vec![0.0; 3], vec![0.3, 0.0, -0.1]],
            noise_sigma: 0.2,
            valid_fraction: 0.25,
            valid_min: 4,
        };
        let ds = make_synthetic(&spec, 17).unwrap();
        let catalog = ds.catalog();
        let model = Model::shared_linear(3);
        let probs = temperature_probs(&catalog, 2.0).unwrap();
        let ones = WeightVector::ones(2);
        let exact = full_gradient(&model, &ds, &probs, &ones).unwrap();
        let mut rng = seeded_rng(3, "unbiased", 0);
        let stats = grad_variance(&model, &ds, &probs, &ones, 40_000, 1, &mut rng).unwrap();
        for ((m, se), e) in stats.mean.iter().zip(stats.mean_std_errors()).zip(&exact) {
            assert!((m - e).abs() <= 4.0 * se, "mean {m} vs exact {e} (se {se})");
        }
    }

    #[test]
    fn gap_curve_is_flat_at_tau_one_and_on_uniform_catalogs() {
        let ds = constant_dataset(&[300, 300], &[0.5, 0.5], 1.0);
        let model = Model::shared_linear(2);
        let pts = variance_gap_curve(&model, &ds, &[1.0, 3.0], 20_000, 1, 7).unwrap();
        for p in &pts {
            assert!(p.trace_gap.abs() <= 3.0 * p.trace_se_pooled.max(1e-12), "{p:?}");
        }
        // tau = 1 on any catalog: the two samplers are identical in law.
        let skew = constant_dataset(&[900, 100], &[0.5, 0.5], 1.0);
        let pts = variance_gap_curve(&model, &skew, &[1.0], 20_000, 1, 9).unwrap();
        assert!(pts[0].trace_gap.abs() <= 3.0 * pts[0].trace_se_pooled.max(1e-12));
    }

    fn record_with_valid(losses: &[f64]) -> RunRecord {
        RunRecord {
            domain_names: vec!["d1".into()],
            rows: losses
                .iter()
                .enumerate()
                .map(|(i, &v)| EvalRow {
                    step: (i as u64 + 1) * 10,
                    tau: Some(1.0),
                    probs: vec![1.0],
                    train_loss: vec![v],
                    valid_loss: vec![v],
                    grad_norm: 0.0,
                })
                .collect(),
            diverged_at: None,
            final_model: Model::shared_linear(1),
        }
    }

    #[test]
    fn threshold_crossing_is_first_eval_step() {
        let record = record_with_valid(&[0.9, 0.5, 0.3, 0.2]);
        let report = convergence_report(&record, &[0.5]).unwrap();
        assert_eq!(report.domains[0].steps_to_threshold, Some(20));
        assert_eq!(report.domains[0].overfit_gap, 0.0);
    }

    #[test]
    fn no_crossing_reports_none() {
        let record = record_with_valid(&[0.9, 0.8, 0.7]);
        let report = convergence_report(&record, &[0.1]).unwrap();
        assert_eq!(report.domains[0].steps_to_threshold, None);
    }

    #[test]
    fn u_shaped_curve_has_positive_overfit_gap() {
        let record = record_with_valid(&[0.9, 0.3, 0.5, 0.6]);
        let report = convergence_report(&record, &[0.4]).unwrap();
        let d = &report.domains[0];
        assert_eq!(d.min_step, 20);
        assert!((d.overfit_gap - 0.3).abs() < 1e-12);
    }

    #[test]
    fn race_is_deterministic_and_identical_arms_tie() {
        let spec = SyntheticTaskSpec {
            feature_dim: 2,
            train_sizes: vec![60, 20],
            theta_shared: vec![1.0, 0.5],
            domain_deltas: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            noise_sigma: 0.1,
            valid_fraction: 0.25,
            valid_min: 16,
        };
        let ds = make_synthetic(&spec, 1).unwrap();
        let config = TrainConfig {
            model: ModelSpec::SharedLinear { dim: 2 },
            plan: SamplingPlan::new(ds.catalog(), PlanKind::Static { tau: 1.0 }).unwrap(),
            mode: TrainMode::TemperatureSampling,
            optimizer: OptimizerSpec::Sgd { lr: 0.05 },
            batch_size: 8,
            total_steps: 200,
            eval_interval: 50,
            batch_mode: BatchMode::Mixed,
            seed: 0,
            arm_index: 0,
        };
        let arms = vec![
            RaceArm { name: "a".into(), config: config.clone() },
            RaceArm { name: "b".into(), config },
        ];
        let thresholds = noise_floor_thresholds(
            &ds,
            &SyntheticTaskSpec {
                feature_dim: 2,
                train_sizes: vec![60, 20],
                theta_shared: vec![1.0, 0.5],
                domain_deltas: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
                noise_sigma: 0.1,
                valid_fraction: 0.25,
                valid_min: 16,
            }
            .true_params(),
            0.1,
        )
        .unwrap();
        let t1 = race(&arms, &ds, &thresholds, &[1, 2, 3]).unwrap();
        let t2 = race(&arms, &ds, &thresholds, &[1, 2, 3]).unwrap();
        assert_eq!(t1, t2);
        // Arms share seeds and differ only in arm index, so medians are
        // comparable but wins need not be symmetric; identical *configs and
        // arm indices* would tie exactly, which the determinism check above
        // already covers.
        assert_eq!(t1.diverged_runs, 0);
    }

    #[test]
    fn windowed_norm_variance_has_expected_length() {
        let record = record_with_valid(&[0.5, 0.4, 0.3, 0.2, 0.1]);
        assert_eq!(grad_norm_variance_windows(&record, 3).len(), 3);
        assert!(grad_norm_variance_windows(&record, 9).is_empty());
    }
}
