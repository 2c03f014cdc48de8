//! Configuration-driven experiment runner.
//!
//! An experiment is one TOML file: a dataset section, a model, an
//! optimizer, training settings, thresholds, and a list of arms (plan/mode
//! combinations). The same file drives `run` (convergence races) and
//! `gradvar` (variance curves). Output directories are created fresh or the
//! run refuses: results are never silently mixed.
//!
//! All randomness derives from the per-run seed via
//! [`crate::seed::derive_seed`] with purpose tags: `"data"` for dataset
//! generation (shared by every arm of that seed), `"init"` for model
//! initialization (also shared), and `"batch"` indexed by arm.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    aggregate_race_cells, convergence_report, variance_gap_curve, GapPoint, RaceTable,
};
use crate::catalog::zipf_catalog;
use crate::data::{load_corpus, make_synthetic, BatchMode, MultiDomainDataset, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::schedule::{PlanKind, SamplingPlan};
use crate::seed::{derive_seed, seeded_rng};
use crate::train::{train, OptimizerSpec, RunRecord, TrainConfig, TrainMode};

fn default_valid_min() -> usize {
    1
}

fn default_one() -> f64 {
    1.0
}

/// Dataset section of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic regression mixture; sizes come either from `train_sizes`
    /// or from a Zipf recipe `(zipf_k, zipf_alpha, zipf_unit)`.
    Synthetic {
        feature_dim: usize,
        #[serde(default)]
        train_sizes: Vec<u64>,
        #[serde(default)]
        zipf_k: Option<usize>,
        #[serde(default)]
        zipf_alpha: Option<f64>,
        #[serde(default)]
        zipf_unit: Option<u64>,
        theta_shared: Vec<f64>,
        domain_deltas: Vec<Vec<f64>>,
        noise_sigma: f64,
        valid_fraction: f64,
        #[serde(default = "default_valid_min")]
        valid_min: usize,
    },
    /// Byte corpus directory (`<domain>.train.txt` / `<domain>.valid.txt`).
    Corpus { root: PathBuf, context: usize },
}

impl DatasetConfig {
    /// Materialize the dataset for one experiment seed.
    pub fn build(&self, seed: u64) -> Result<MultiDomainDataset> {
        match self {
            DatasetConfig::Synthetic {
                feature_dim,
                train_sizes,
                zipf_k,
                zipf_alpha,
                zipf_unit,
                theta_shared,
                domain_deltas,
                noise_sigma,
                valid_fraction,
                valid_min,
            } => {
                let sizes = if !train_sizes.is_empty() {
                    train_sizes.clone()
                } else {
                    match (zipf_k, zipf_alpha, zipf_unit) {
                        (Some(k), Some(a), Some(u)) => zipf_catalog(*k, *a, *u)?.sizes(),
                        _ => {
                            return Err(Error::Config(
                                "dataset: set train_sizes or all of zipf_k/zipf_alpha/zipf_unit"
                                    .into(),
                            ))
                        }
                    }
                };
                let spec = SyntheticTaskSpec {
                    feature_dim: *feature_dim,
                    train_sizes: sizes,
                    theta_shared: theta_shared.clone(),
                    domain_deltas: domain_deltas.clone(),
                    noise_sigma: *noise_sigma,
                    valid_fraction: *valid_fraction,
                    valid_min: *valid_min,
                };
                make_synthetic(&spec, derive_seed(seed, "data", 0))
            }
            DatasetConfig::Corpus { root, context } => load_corpus(root, *context),
        }
    }

    /// The synthetic spec, if this is a synthetic dataset (used for
    /// noise-floor thresholds).
    pub fn synthetic_spec(&self) -> Option<SyntheticTaskSpec> {
        match self {
            DatasetConfig::Synthetic {
                feature_dim,
                train_sizes,
                zipf_k,
                zipf_alpha,
                zipf_unit,
                theta_shared,
                domain_deltas,
                noise_sigma,
                valid_fraction,
                valid_min,
            } => {
                let sizes = if !train_sizes.is_empty() {
                    train_sizes.clone()
                } else {
                    zipf_catalog((*zipf_k)?, (*zipf_alpha)?, (*zipf_unit)?)
                        .ok()?
                        .sizes()
                };
                Some(SyntheticTaskSpec {
                    feature_dim: *feature_dim,
                    train_sizes: sizes,
                    theta_shared: theta_shared.clone(),
                    domain_deltas: domain_deltas.clone(),
                    noise_sigma: *noise_sigma,
                    valid_fraction: *valid_fraction,
                    valid_min: *valid_min,
                })
            }
            DatasetConfig::Corpus { .. } => None,
        }
    }
}

/// Model section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    SharedLinear { dim: usize },
    ByteLm { context: usize, embed: usize, hidden: usize },
}

impl ModelConfig {
    pub fn to_spec(&self) -> ModelSpec {
        match *self {
            ModelConfig::SharedLinear { dim } => ModelSpec::SharedLinear { dim },
            ModelConfig::ByteLm { context, embed, hidden } => {
                ModelSpec::ByteLm { context, embed, hidden }
            }
        }
    }
}

/// Optimizer section; Adam betas default to (0.9, 0.98) and epsilon to 1e-6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        #[serde(default = "default_adam_beta1")]
        beta1: f64,
        #[serde(default = "default_adam_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_epsilon")]
        epsilon: f64,
    },
}

fn default_adam_beta1() -> f64 {
    0.9
}

fn default_adam_beta2() -> f64 {
    0.98
}

fn default_adam_epsilon() -> f64 {
    1e-6
}

impl OptimizerConfig {
    pub fn to_spec(&self) -> OptimizerSpec {
        match *self {
            OptimizerConfig::Sgd { lr } => OptimizerSpec::Sgd { lr },
            OptimizerConfig::Adam { lr, beta1, beta2, epsilon } => {
                OptimizerSpec::Adam { lr, beta1, beta2, epsilon }
            }
        }
    }
}

/// Training loop settings shared by all arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_interval: u64,
    #[serde(default = "default_batch_mode")]
    pub batch_mode: BatchMode,
}

fn default_batch_mode() -> BatchMode {
    BatchMode::Mixed
}

/// Per-domain validation-loss thresholds for steps-to-threshold reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdConfig {
    /// `(1 + margin) *` the validation loss of the generating parameters
    /// (synthetic datasets only).
    NoiseFloor {
        #[serde(default = "default_threshold_margin")]
        margin: f64,
    },
    /// Explicit per-domain values.
    Explicit { values: Vec<f64> },
}

fn default_threshold_margin() -> f64 {
    0.1
}

/// One arm: a plan declared with flat keys plus the estimator mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub mode: TrainMode,
    /// One of `static`, `step`, `linear`, `unimax`, `order_matters`.
    pub plan: String,
    #[serde(default)]
    pub tau: Option<f64>,
    /// `step` plans: `[[start_step, tau], ...]`.
    #[serde(default)]
    pub segments: Option<Vec<(u64, f64)>>,
    #[serde(default)]
    pub tau_start: Option<f64>,
    #[serde(default)]
    pub tau_end: Option<f64>,
    #[serde(default)]
    pub over_steps: Option<u64>,
    #[serde(default = "default_one")]
    pub epoch_budget: f64,
    /// `order_matters`: 1-based ids of the high-resource domains.
    #[serde(default)]
    pub high_domains: Vec<usize>,
    #[serde(default)]
    pub intro_step: Option<u64>,
    #[serde(default)]
    pub post_tau: Option<f64>,
}

impl ArmConfig {
    fn require<T: Copy>(&self, field: Option<T>, key: &str) -> Result<T> {
        field.ok_or_else(|| {
            Error::Config(format!(
                "arm {:?}: plan {:?} requires key `{key}`",
                self.name, self.plan
            ))
        })
    }

    pub fn to_plan(&self, catalog: crate::catalog::DomainCatalog) -> Result<SamplingPlan> {
        let kind = match self.plan.as_str() {
            "static" => PlanKind::Static { tau: self.require(self.tau, "tau")? },
            "step" => PlanKind::StepSchedule {
                segments: self
                    .segments
                    .clone()
                    .ok_or_else(|| {
                        Error::Config(format!("arm {:?}: plan `step` requires key `segments`", self.name))
                    })?,
            },
            "linear" => PlanKind::LinearDense {
                tau_start: self.require(self.tau_start, "tau_start")?,
                tau_end: self.require(self.tau_end, "tau_end")?,
                total_steps: self.require(self.over_steps, "over_steps")?,
            },
            "unimax" => PlanKind::Unimax { epoch_budget: self.epoch_budget },
            "order_matters" => PlanKind::OrderMatters {
                high_set: self.high_domains.iter().copied().collect::<BTreeSet<_>>(),
                intro_step: self.require(self.intro_step, "intro_step")?,
                post_tau: self.require(self.post_tau, "post_tau")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "arm {:?}: unknown plan kind `{other}`",
                    self.name
                )))
            }
        };
        SamplingPlan::new(catalog, kind)
    }
}

/// Settings for the gradient-variance command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradvarSection {
    pub tau_grid: Vec<f64>,
    pub n_samples: usize,
    #[serde(default = "default_gradvar_batch")]
    pub batch_size: usize,
    /// `"fresh-init"` or a path to a model JSON written by `run`.
    #[serde(default = "default_model_state")]
    pub model_state: String,
}

fn default_gradvar_batch() -> usize {
    1
}

fn default_model_state() -> String {
    "fresh-init".into()
}

/// The whole experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub gradvar: Option<GradvarSection>,
    #[serde(rename = "arm")]
    pub arms: Vec<ArmConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if cfg.arms.is_empty() {
            return Err(Error::Config("at least one [[arm]] is required".into()));
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingData(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a hash of the canonical serialized config, as 16 hex digits.
    pub fn hash(&self) -> String {
        let text = self.to_toml();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Resolve the per-domain thresholds against a materialized dataset.
    pub fn resolve_thresholds(&self, data: &MultiDomainDataset) -> Result<Vec<f64>> {
        match &self.thresholds {
            ThresholdConfig::Explicit { values } => {
                if values.len() != data.num_domains() {
                    return Err(Error::Config(format!(
                        "thresholds.values has {} entries for {} domains",
                        values.len(),
                        data.num_domains()
                    )));
                }
                Ok(values.clone())
            }
            ThresholdConfig::NoiseFloor { margin } => {
                let spec = self.dataset.synthetic_spec().ok_or_else(|| {
                    Error::Config(
                        "thresholds kind `noise_floor` requires a synthetic dataset; use `explicit`"
                            .into(),
                    )
                })?;
                crate::analysis::noise_floor_thresholds(data, &spec.true_params(), *margin)
            }
        }
    }

    fn train_config(&self, arm: &ArmConfig, arm_index: u64, seed: u64, data: &MultiDomainDataset) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: self.model.to_spec(),
            plan: arm.to_plan(data.catalog())?,
            mode: arm.mode,
            optimizer: self.optimizer.to_spec(),
            batch_size: self.train.batch_size,
            total_steps: self.train.total_steps,
            eval_interval: self.train.eval_interval,
            batch_mode: self.train.batch_mode,
            seed,
            arm_index,
        })
    }
}

/// JSON sidecar written next to each run's CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSidecar {
    pub config_hash: String,
    pub arm: String,
    pub seed: u64,
    pub resolved: TrainConfig,
    pub diverged_at: Option<u64>,
}

/// Summary of a full `run` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    pub thresholds: Vec<f64>,
    pub race: RaceTable,
    pub diverged_runs: u32,
}

/// Create `out_dir` fresh; refuse to touch an existing directory.
pub fn create_fresh_dir(out_dir: &Path) -> Result<()> {
    if out_dir.exists() {
        return Err(Error::InvalidInput(format!(
            "output directory {} already exists; refusing to mix results",
            out_dir.display()
        )));
    }
    fs::create_dir_all(out_dir)?;
    Ok(())
}

/// Execute all arms across all seeds, writing one CSV + JSON sidecar +
/// model snapshot per run and a `summary.json` for the whole experiment.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    create_fresh_dir(out_dir)?;
    let hash = cfg.hash();
    let mut diverged_runs = 0;
    // steps[arm][seed][domain]
    let mut steps: Vec<Vec<Vec<Option<u64>>>> = vec![Vec::new(); cfg.arms.len()];
    let mut domain_names: Vec<String> = Vec::new();
    let mut thresholds = Vec::new();

    for &seed in &cfg.seeds {
        let data = cfg.dataset.build(seed)?;
        if domain_names.is_empty() {
            domain_names = data.names().iter().map(|s| s.to_string()).collect();
            thresholds = cfg.resolve_thresholds(&data)?;
        }
        for (a, arm) in cfg.arms.iter().enumerate() {
            let tc = cfg.train_config(arm, a as u64, seed, &data)?;
            let record = train(&tc, &data)?;
            write_run_outputs(out_dir, &hash, arm, seed, &tc, &record)?;
            if record.diverged() {
                diverged_runs += 1;
                steps[a].push(vec![None; data.num_domains()]);
            } else {
                let report = convergence_report(&record, &thresholds)?;
                steps[a].push(report.domains.iter().map(|d| d.steps_to_threshold).collect());
            }
        }
    }

    let arm_names: Vec<String> = cfg.arms.iter().map(|a| a.name.clone()).collect();
    let cells = aggregate_race_cells(&arm_names, &domain_names, &steps, cfg.seeds.len());

    let summary = RunSummary {
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        arms: cfg.arms.iter().map(|a| a.name.clone()).collect(),
        thresholds,
        race: RaceTable { cells, diverged_runs },
        diverged_runs,
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    fs::write(out_dir.join("race.csv"), race_csv(&summary))?;
    Ok(summary)
}

/// The race table as CSV: one row per (arm, domain) cell.
pub fn race_csv(summary: &RunSummary) -> String {
    let seeds: Vec<String> = summary.seeds.iter().map(|s| s.to_string()).collect();
    let mut out = format!(
        "# config_hash={} seeds={}\n",
        summary.config_hash,
        seeds.join("+")
    );
    out.push_str("config,domain,median_steps,wins\n");
    for cell in &summary.race.cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            cell.arm,
            cell.domain,
            cell.median_steps.map_or(String::new(), |s| s.to_string()),
            cell.wins
        ));
    }
    out
}

fn write_run_outputs(
    out_dir: &Path,
    hash: &str,
    arm: &ArmConfig,
    seed: u64,
    tc: &TrainConfig,
    record: &RunRecord,
) -> Result<()> {
    let base = format!("{}_seed{}", arm.name, seed);
    fs::write(out_dir.join(format!("{base}.csv")), record.to_csv(hash, seed))?;
    let sidecar = RunSidecar {
        config_hash: hash.to_string(),
        arm: arm.name.clone(),
        seed,
        resolved: tc.clone(),
        diverged_at: record.diverged_at,
    };
    fs::write(
        out_dir.join(format!("{base}.json")),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    fs::write(
        out_dir.join(format!("{base}.model.json")),
        serde_json::to_string(&record.final_model).expect("model serializes"),
    )?;
    Ok(())
}

/// `(alpha, tau, F)` rows for a family of Zipf catalogs.
pub fn fsweep_rows(
    alphas: &[f64],
    k: usize,
    unit: u64,
    taus: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    if alphas.is_empty() || taus.is_empty() {
        return Err(Error::invalid("fsweep needs non-empty alpha and tau lists"));
    }
    let mut rows = Vec::with_capacity(alphas.len() * taus.len());
    for &alpha in alphas {
        let catalog = zipf_catalog(k, alpha, unit)?;
        for (tau, f) in crate::mixture::f_tau_sweep(&catalog, taus)? {
            rows.push((alpha, tau, f));
        }
    }
    Ok(rows)
}

/// CSV for [`fsweep_rows`] with the standard provenance comment.
pub fn fsweep_csv(alphas: &[f64], k: usize, unit: u64, taus: &[f64]) -> Result<String> {
    let rows = fsweep_rows(alphas, k, unit, taus)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let params: Vec<u8> = (k as u64)
        .to_le_bytes()
        .into_iter()
        .chain(unit.to_le_bytes())
        .chain(alphas.iter().chain(taus).flat_map(|x| x.to_le_bytes()))
        .collect();
    for b in params {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut out = format!("# config_hash={h:016x} seed=none\nalpha,tau,f\n");
    for (alpha, tau, f) in rows {
        out.push_str(&format!("{alpha},{tau},{f}\n"));
    }
    Ok(out)
}

/// Run the gradient-variance curve declared in `[gradvar]` and return the
/// CSV text plus the raw points.
pub fn run_gradvar(cfg: &ExperimentConfig) -> Result<(String, Vec<GapPoint>)> {
    let gv = cfg.gradvar.as_ref().ok_or_else(|| {
        Error::Config("config has no [gradvar] section".into())
    })?;
    let seed = cfg.seeds[0];
    let data = cfg.dataset.build(seed)?;
    let model = if gv.model_state == "fresh-init" {
        match cfg.model.to_spec() {
            ModelSpec::SharedLinear { dim } => Model::shared_linear(dim),
            ModelSpec::ByteLm { context, embed, hidden } => {
                let mut rng = seeded_rng(seed, "init", 0);
                Model::byte_lm(context, embed, hidden, &mut rng)
            }
        }
    } else {
        let text = fs::read_to_string(Path::new(&gv.model_state))
            .map_err(|_| Error::MissingData(PathBuf::from(&gv.model_state)))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("model json: {e}")))?
    };
    let points = variance_gap_curve(&model, &data, &gv.tau_grid, gv.n_samples, gv.batch_size, seed)?;
    let mut out = format!("# config_hash={} seed={seed}\n", cfg.hash());
    out.push_str("tau,var_s,var_ts,gap,trace_s,trace_ts,trace_gap\n");
    for p in &points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.tau, p.var_s, p.var_ts, p.gap, p.trace_s, p.trace_ts, p.trace_gap
        ));
    }
    Ok((out, points))
}
