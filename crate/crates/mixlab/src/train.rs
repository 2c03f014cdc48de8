//! Deterministic training runs.
//!
//! [`train`] executes a plan for `total_steps` minibatch updates with SGD or
//! Adam and logs a [`RunRecord`]: per-evaluation-step losses per domain, the
//! temperature in force, and the minibatch gradient norm. Runs are fully
//! deterministic in `(config, seed)`: all randomness flows through
//! [`crate::seed::derive_seed`] with the purpose tags `"init"` (shared
//! across arms of an experiment) and `"batch"` (per arm), and every
//! summation order is fixed.

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch_mode, BatchMode, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, evaluate_train_prefix, Model, ModelSpec};
use crate::schedule::{scalarization_plan_of, PlanState, SamplingPlan};
use crate::seed::seeded_rng;

/// How many train examples per domain the logged train loss averages over.
pub const TRAIN_EVAL_CAP: usize = 4096;

/// Which estimator family the run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Sample with the plan's probabilities, unit loss weights.
    TemperatureSampling,
    /// Sample proportionally, weight losses by the plan's equivalent
    /// weights. Requires a temperature-based plan.
    Scalarization,
}

/// Optimizer family and hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerSpec {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerSpec {
    /// Adam with the defaults used throughout: betas (0.9, 0.98) and
    /// epsilon 1e-6.
    pub fn adam_default(lr: f64) -> Self {
        OptimizerSpec::Adam { lr, beta1: 0.9, beta2: 0.98, epsilon: 1e-6 }
    }

    fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr } => lr,
            OptimizerSpec::Adam { lr, .. } => lr,
        }
    }
}

enum OptState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptState {
    fn new(spec: &OptimizerSpec, p: usize) -> Self {
        match spec {
            OptimizerSpec::Sgd { .. } => OptState::Sgd,
            OptimizerSpec::Adam { .. } => OptState::Adam {
                m: vec![0.0; p],
                v: vec![0.0; p],
                t: 0,
            },
        }
    }

    fn apply(&mut self, spec: &OptimizerSpec, params: &mut [f64], grad: &[f64]) {
        match (self, spec) {
            (OptState::Sgd, OptimizerSpec::Sgd { lr }) => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            (
                OptState::Adam { m, v, t },
                OptimizerSpec::Adam { lr, beta1, beta2, epsilon },
            ) => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
            _ => unreachable!("optimizer state/spec mismatch"),
        }
    }
}

/// Everything a run needs besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub plan: SamplingPlan,
    pub mode: TrainMode,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub batch_mode: BatchMode,
    /// Root seed of the run; see the module docs for the derivation rule.
    pub seed: u64,
    /// Index of this run within a multi-arm experiment. Model init is
    /// arm-independent so arms start from the same parameters; batch
    /// streams are arm-specific.
    pub arm_index: u64,
}

impl TrainConfig {
    fn validate(&self, data: &MultiDomainDataset) -> Result<()> {
        if self.optimizer.lr() <= 0.0 || !self.optimizer.lr().is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("total steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.eval_interval == 0 || self.total_steps % self.eval_interval != 0 {
            return Err(Error::invalid(
                "eval interval must divide total steps evenly",
            ));
        }
        if self.plan.catalog().len() != data.num_domains() {
            return Err(Error::invalid("plan catalog does not match dataset domains"));
        }
        if self.mode == TrainMode::Scalarization && !self.plan.is_temperature_based() {
            return Err(Error::UnsupportedPlan(
                "scalarization mode requires a temperature-based plan".into(),
            ));
        }
        match (&self.model, data.is_regression()) {
            (ModelSpec::SharedLinear { dim }, true) => {
                if *dim != data.example_shape() {
                    return Err(Error::invalid("model dim must match feature dim"));
                }
            }
            (ModelSpec::ByteLm { context, .. }, false) => {
                if *context != data.example_shape() {
                    return Err(Error::invalid("model context must match corpus context"));
                }
            }
            _ => return Err(Error::invalid("model kind does not match dataset kind")),
        }
        Ok(())
    }

    fn init_model(&self) -> Model {
        match self.model {
            ModelSpec::SharedLinear { dim } => Model::shared_linear(dim),
            ModelSpec::ByteLm { context, embed, hidden } => {
                let mut rng = seeded_rng(self.seed, "init", 0);
                Model::byte_lm(context, embed, hidden, &mut rng)
            }
        }
    }
}

/// One logged evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Number of optimizer updates completed when the row was logged.
    pub step: u64,
    /// Temperature of the update that completed at `step` (none for
    /// probability plans).
    pub tau: Option<f64>,
    /// Sampling probabilities used at that update.
    pub probs: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// Norm of the minibatch gradient applied at that update.
    pub grad_norm: f64,
}

/// The full time series of a run plus the final model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub domain_names: Vec<String>,
    pub rows: Vec<EvalRow>,
    /// Step at which the loss became non-finite, if the run diverged.
    pub diverged_at: Option<u64>,
    pub final_model: Model,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Serialize as CSV: a provenance comment, a header row, then one row
    /// per eval step with columns
    /// `step,tau,train_<d>...,valid_<d>...,grad_norm`.
    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut out = String::new();
        out.push_str(&format!("# config_hash={config_hash} seed={seed}\n"));
        out.push_str("step,tau");
        for n in &self.domain_names {
            out.push_str(&format!(",train_{n}"));
        }
        for n in &self.domain_names {
            out.push_str(&format!(",valid_{n}"));
        }
        out.push_str(",grad_norm\n");
        for row in &self.rows {
            out.push_str(&row.step.to_string());
            out.push(',');
            if let Some(tau) = row.tau {
                out.push_str(&format!("{tau}"));
            }
            for v in row.train_loss.iter().chain(&row.valid_loss) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", row.grad_norm));
        }
        out
    }
}

/// Run the configured training loop against the dataset.
///
/// Divergence (a non-finite batch loss or parameter) stops the loop and is
/// recorded rather than returned as an error, so partial series remain
/// inspectable.
pub fn train(config: &TrainConfig, data: &MultiDomainDataset) -> Result<RunRecord> {
    config.validate(data)?;
    let effective_plan = match config.mode {
        TrainMode::TemperatureSampling => config.plan.clone(),
        TrainMode::Scalarization => scalarization_plan_of(&config.plan)?,
    };
    let k = data.num_domains();
    let mut model = config.init_model();
    let mut opt_state = OptState::new(&config.optimizer, model.param_count());
    let mut state = PlanState::new(k);
    let mut rng = seeded_rng(config.seed, "batch", config.arm_index);
    let mut grad = vec![0.0; model.param_count()];
    let mut rows = Vec::with_capacity((config.total_steps / config.eval_interval) as usize);
    let mut diverged_at = None;

    for step_idx in 0..config.total_steps {
        let (probs, weights) = effective_plan.plan_at(&state)?;
        let batch = sample_batch_mode(
            data,
            &probs,
            &weights,
            config.batch_size,
            config.batch_mode,
            &mut rng,
        )?;

        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        for (_, example, weight) in batch.resolve(data) {
            batch_loss += model.accumulate_loss_and_grad(example, weight, &mut grad);
        }
        let inv_b = 1.0 / config.batch_size as f64;
        batch_loss *= inv_b;
        grad.iter_mut().for_each(|g| *g *= inv_b);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

        opt_state.apply(&config.optimizer, model.params_mut(), &grad);
        state.record_batch(&effective_plan, &batch.domain_counts(k));

        let completed = step_idx + 1;
        if !batch_loss.is_finite() || !model.is_finite() {
            diverged_at = Some(completed);
            break;
        }
        if completed % config.eval_interval == 0 {
            rows.push(EvalRow {
                step: completed,
                tau: config.plan.effective_tau(step_idx),
                probs: probs.as_slice().to_vec(),
                train_loss: evaluate_train_prefix(&model, data, TRAIN_EVAL_CAP),
                valid_loss: evaluate(&model, data),
                grad_norm,
            });
        }
    }

    Ok(RunRecord {
        domain_names: data.names().iter().map(|s| s.to_string()).collect(),
        rows,
        diverged_at,
        final_model: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticTaskSpec};
    use crate::model::full_gradient;
    use crate::mixture::temperature_probs;
    use crate::catalog::WeightVector;
    use crate::schedule::PlanKind;

    fn spec(sizes: Vec<u64>, sigma: f64, dim: usize) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            feature_dim: dim,
            train_sizes: sizes.clone(),
            theta_shared: (0..dim).map(|i| 0.5 + 0.25 * i as f64).collect(),
            domain_deltas: sizes.iter().map(|_| vec![0.0; dim]).collect(),
            noise_sigma: sigma,
            valid_fraction: 0.25,
            valid_min: 8,
        }
    }

    fn static_config(data: &MultiDomainDataset, tau: f64, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            model: ModelSpec::SharedLinear { dim: data.example_shape() },
            plan: SamplingPlan::new(data.catalog(), PlanKind::Static { tau }).unwrap(),
            mode,
            optimizer: OptimizerSpec::Sgd { lr: 0.05 },
            batch_size: 8,
            total_steps: 400,
            eval_interval: 100,
            batch_mode: BatchMode::Mixed,
            seed: 1,
            arm_index: 0,
        }
    }

    #[test]
    fn sgd_converges_on_noiseless_quadratic() {
        let ds = make_synthetic(&spec(vec![60], 0.0, 3), 0).unwrap();
        let cfg = static_config(&ds, 1.0, TrainMode::TemperatureSampling);
        let record = train(&cfg, &ds).unwrap();
        assert!(!record.diverged());
        let train_losses: Vec<f64> = record.rows.iter().map(|r| r.train_loss[0]).collect();
        for pair in train_losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "train loss rose: {train_losses:?}");
        }
        assert!(*train_losses.last().unwrap() < 1e-6, "{train_losses:?}");
    }

    #[test]
    fn identical_config_and_seed_reproduce_bitwise() {
        let ds = make_synthetic(&spec(vec![50, 20], 0.2, 2), 3).unwrap();
        let cfg = static_config(&ds, 2.0, TrainMode::TemperatureSampling);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv("h", 1), b.to_csv("h", 1));
    }

    #[test]
    fn eval_interval_must_divide_total_steps() {
        let ds = make_synthetic(&spec(vec![30], 0.0, 2), 0).unwrap();
        let mut cfg = static_config(&ds, 1.0, TrainMode::TemperatureSampling);
        cfg.eval_interval = 300;
        assert!(train(&cfg, &ds).is_err());
    }

    #[test]
    fn scalarization_mode_requires_temperature_plan() {
        let ds = make_synthetic(&spec(vec![30, 10], 0.0, 2), 0).unwrap();
        let mut cfg = static_config(&ds, 1.0, TrainMode::Scalarization);
        cfg.plan =
            SamplingPlan::new(ds.catalog(), PlanKind::Unimax { epoch_budget: 1.0 }).unwrap();
        assert!(matches!(train(&cfg, &ds), Err(Error::UnsupportedPlan(_))));
    }

    #[test]
    fn divergence_is_flagged_with_step() {
        let ds = make_synthetic(&spec(vec![40], 0.0, 2), 1).unwrap();
        let mut cfg = static_config(&ds, 1.0, TrainMode::TemperatureSampling);
        cfg.optimizer = OptimizerSpec::Sgd { lr: 1e6 };
        let record = train(&cfg, &ds).unwrap();
        assert!(record.diverged());
        assert!(record.diverged_at.unwrap() <= cfg.total_steps);
    }

    #[test]
    fn adam_with_defaults_converges() {
        let ds = make_synthetic(&spec(vec![60], 0.0, 3), 0).unwrap();
        let mut cfg = static_config(&ds, 1.0, TrainMode::TemperatureSampling);
        cfg.optimizer = OptimizerSpec::adam_default(0.05);
        cfg.total_steps = 1200;
        cfg.eval_interval = 300;
        let record = train(&cfg, &ds).unwrap();
        assert!(!record.diverged());
        assert!(record.rows.last().unwrap().train_loss[0] < 1e-4);
    }

    #[test]
    fn logged_tau_tracks_the_schedule() {
        let ds = make_synthetic(&spec(vec![50, 20], 0.1, 2), 5).unwrap();
        let mut cfg = static_config(&ds, 1.0, TrainMode::TemperatureSampling);
        cfg.plan = SamplingPlan::new(
            ds.catalog(),
            PlanKind::StepSchedule { segments: vec![(0, 5.0), (200, 1.0)] },
        )
        .unwrap();
        let record = train(&cfg, &ds).unwrap();
        let taus: Vec<Option<f64>> = record.rows.iter().map(|r| r.tau).collect();
        // Rows at steps 100, 200, 300, 400; the update completing at step 200
        // had index 199, still tau = 5.
        assert_eq!(taus, vec![Some(5.0), Some(5.0), Some(1.0), Some(1.0)]);
    }

    #[test]
    fn sgd_trajectory_is_invariant_to_weight_lr_rescaling() {
        // Scaling all loss weights by c and the learning rate by 1/c leaves
        // plain SGD updates unchanged; with c a power of two the match is
        // bitwise. Run the loop manually with a scaled weight vector.
        use crate::data::sample_batch;
        let ds = make_synthetic(&spec(vec![50, 20], 0.3, 2), 7).unwrap();
        let catalog = ds.catalog();
        let probs = temperature_probs(&catalog, 1.0).unwrap();
        let c = 4.0;
        let base_w = crate::mixture::equivalent_weights(&catalog, 2.0).unwrap();
        let scaled_w =
            WeightVector::from_raw(base_w.as_slice().iter().map(|w| w * c).collect());

        let run = |weights: &WeightVector, lr: f64| -> Vec<f64> {
            let mut model = Model::shared_linear(2);
            let mut rng = seeded_rng(11, "batch", 0);
            let mut grad = vec![0.0; 2];
            for _ in 0..200 {
                let batch = sample_batch(&ds, &probs, weights, 8, &mut rng).unwrap();
                grad.iter_mut().for_each(|g| *g = 0.0);
                for (_, ex, w) in batch.resolve(&ds) {
                    model.accumulate_loss_and_grad(ex, w, &mut grad);
                }
                for g in grad.iter_mut() {
                    *g /= 8.0;
                }
                for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            model.params().to_vec()
        };

        let theta_base = run(&base_w, 0.04);
        let theta_scaled = run(&scaled_w, 0.04 / c);
        assert_eq!(theta_base, theta_scaled);
    }

    #[test]
    fn full_gradient_descent_converges_linearly_below_critical_lr() {
        // Gradient descent on the exact population gradient of a noiseless
        // quadratic contracts at a constant factor per step.
        let ds = make_synthetic(&spec(vec![200], 0.0, 3), 13).unwrap();
        let catalog = ds.catalog();
        let probs = temperature_probs(&catalog, 1.0).unwrap();
        let ones = WeightVector::ones(1);
        let mut model = Model::shared_linear(3);
        let mut losses = Vec::new();
        for _ in 0..40 {
            let g = full_gradient(&model, &ds, &probs, &ones).unwrap();
            for (p, gi) in model.params_mut().iter_mut().zip(&g) {
                *p -= 0.05 * gi;
            }
            losses.push(evaluate_train_prefix(&model, &ds, usize::MAX)[0]);
        }
        for pair in losses.windows(2) {
            if pair[0] > 1e-14 {
                assert!(pair[1] < pair[0] * 0.95, "not contracting: {pair:?}");
            }
        }
    }

    #[test]
    fn csv_has_header_comment_and_schema() {
        let ds = make_synthetic(&spec(vec![30, 10], 0.1, 2), 2).unwrap();
        let cfg = static_config(&ds, 2.0, TrainMode::TemperatureSampling);
        let record = train(&cfg, &ds).unwrap();
        let csv = record.to_csv("deadbeef", 42);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "# config_hash=deadbeef seed=42");
        assert_eq!(
            lines.next().unwrap(),
            "step,tau,train_d1,train_d2,valid_d1,valid_d2,grad_norm"
        );
        assert_eq!(csv.lines().count(), 2 + record.rows.len());
    }
}
