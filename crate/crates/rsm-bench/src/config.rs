//! JSON experiment configuration.
//!
//! One document describes one experiment. Every struct rejects unknown keys,
//! and every field except `kind` has a default, so the smallest valid
//! configuration is `{"kind": "ScheduleDump"}`.

use std::path::{Path, PathBuf};

use rsm_core::estimators::StatsMode;
use rsm_core::flow_schedules::{FlowParams, FlowSpec, NoiseRule, SamplerKind, Schedule, TimeGrid};
use rsm_core::mixture_oracle::{GaussianMixture, LinearReward, TiltedPair};
use rsm_core::rsm_objective::{ClipRule, RegistryOptions};
use rsm_core::training::{FinetuneOptions, TrainConfig};
use rsm_core::Vec2;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    RmseBench,
    ScheduleDump,
    Train,
    KernelAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_experiment_id")]
    pub experiment_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub setup: Setup,
    #[serde(default)]
    pub rmse: RmseConfig,
    #[serde(default)]
    pub schedules: ScheduleConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub audit: AuditConfig,
}

fn default_experiment_id() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    /// A configuration of `kind` with every other field at its default.
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            experiment_id: default_experiment_id(),
            seed: 0,
            setup: Setup::default(),
            rmse: RmseConfig::default(),
            schedules: ScheduleConfig::default(),
            train: TrainSection::default(),
            audit: AuditConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| BenchError::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises")
    }

    /// Checks the parts of the document that the selected `kind` uses.
    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.is_empty() || self.experiment_id.contains([',', '"', '\n']) {
            return Err(BenchError::invalid(
                "experiment_id must be non-empty and free of commas, quotes and newlines",
            ));
        }
        match self.kind {
            ExperimentKind::RmseBench => {
                let sched = self.setup.schedule()?;
                self.setup.pair()?;
                self.rmse.validate(&sched)
            }
            ExperimentKind::ScheduleDump => {
                self.setup.schedule()?;
                Ok(())
            }
            ExperimentKind::Train => {
                self.setup.schedule()?;
                self.setup.pair()?;
                self.train.validate()
            }
            ExperimentKind::KernelAudit => {
                self.setup.schedule()?;
                self.audit.validate()
            }
        }
    }
}

/// The reference distribution, reward and sampler shared by all experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Setup {
    pub mixture: MixtureSpec,
    pub reward: LinearReward,
    pub alpha: f64,
    pub flow: FlowParams,
    pub grid: GridSpec,
    pub noise: NoiseRule,
    pub sampler: SamplerKind,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec::Toy,
            reward: LinearReward::toy(),
            alpha: 1.0,
            flow: FlowParams::Vp {
                beta_min: 0.05,
                beta_max: 10.0,
            },
            grid: GridSpec::default(),
            noise: NoiseRule::DdpmEquivalent,
            sampler: SamplerKind::Ddim,
        }
    }
}

impl Setup {
    pub fn flow(&self) -> Result<FlowSpec> {
        FlowSpec::new(self.flow).map_err(invalid)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        self.grid.build()
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.flow()?, self.grid()?, self.noise, self.sampler).map_err(invalid)
    }

    pub fn reference(&self) -> Result<GaussianMixture> {
        self.mixture.build()
    }

    /// Reference, reward tilt and `α`; the closed-form tilt is checked
    /// against grid integration on construction.
    pub fn pair(&self) -> Result<TiltedPair> {
        TiltedPair::new(self.reference()?, self.reward, self.alpha).map_err(invalid)
    }
}

fn invalid(e: rsm_core::Error) -> BenchError {
    BenchError::Invalid(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum MixtureSpec {
    /// The three-component triangle mixture.
    Toy,
    Gaussian {
        mean: Vec2,
        var: f64,
    },
    Custom {
        weights: Vec<f64>,
        means: Vec<Vec2>,
        component_var: f64,
    },
}

impl MixtureSpec {
    pub fn build(&self) -> Result<GaussianMixture> {
        match self {
            MixtureSpec::Toy => Ok(GaussianMixture::toy()),
            MixtureSpec::Gaussian { mean, var } => GaussianMixture::gaussian(*mean, *var).map_err(invalid),
            MixtureSpec::Custom {
                weights,
                means,
                component_var,
            } => GaussianMixture::new(weights.clone(), means.clone(), *component_var).map_err(invalid),
        }
    }
}

/// `n` steps on `[0, t_max]`, optionally warped by
/// `t ↦ shift·t/(1 + (shift − 1)t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n: usize,
    pub t_max: f64,
    pub shift: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n: 50,
            t_max: 1.0,
            shift: 1.0,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<TimeGrid> {
        if !(self.t_max > 0.0 && self.t_max <= 1.0) {
            return Err(BenchError::invalid(format!(
                "grid t_max must lie in (0, 1], got {}",
                self.t_max
            )));
        }
        if self.t_max == 1.0 && self.shift == 1.0 {
            TimeGrid::uniform(self.n).map_err(invalid)
        } else {
            TimeGrid::shifted(self.n, self.t_max, self.shift).map_err(invalid)
        }
    }
}

/// Which exact field drives the rollouts of the estimator bench.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutField {
    /// The reward-tilted (optimal) marginals.
    Tilted,
    /// The reference marginals.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    FirstOrder,
    ZerothOrder,
}

/// Node at which an estimator reads the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookaheadSpec {
    /// `j = 0`.
    Full,
    /// `j = i − 1`.
    OneStep,
    /// `j = i`.
    Current,
    /// `j = max(i − d, 0)`.
    Depth(usize),
}

impl LookaheadSpec {
    pub fn node(self, i: usize) -> usize {
        match self {
            LookaheadSpec::Full => 0,
            LookaheadSpec::OneStep => i.saturating_sub(1),
            LookaheadSpec::Current => i,
            LookaheadSpec::Depth(d) => i.saturating_sub(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub label: String,
    pub family: Family,
    pub lookahead: LookaheadSpec,
    #[serde(default = "default_stats_mode")]
    pub stats_mode: StatsMode,
    /// Branching stages between `i` and `j`, evenly spaced; each stage
    /// multiplies the number of leaves by `K`.
    #[serde(default = "one")]
    pub splits: usize,
    /// Inject noise only at the branching stages.
    #[serde(default)]
    pub localize: bool,
}

fn default_stats_mode() -> StatsMode {
    StatsMode::Raw
}

fn one() -> usize {
    1
}

impl EstimatorSpec {
    pub fn new(label: &str, family: Family, lookahead: LookaheadSpec, stats_mode: StatsMode) -> Self {
        Self {
            label: label.into(),
            family,
            lookahead,
            stats_mode,
            splits: 1,
            localize: false,
        }
    }

    /// Short descriptor written to the `estimator` column.
    pub fn descriptor(&self) -> String {
        let fam = match self.family {
            Family::FirstOrder => "FO",
            Family::ZerothOrder => "ZO",
        };
        let la = match self.lookahead {
            LookaheadSpec::Full => "full".to_string(),
            LookaheadSpec::OneStep => "one-step".to_string(),
            LookaheadSpec::Current => "current".to_string(),
            LookaheadSpec::Depth(d) => format!("depth-{d}"),
        };
        let mut s = format!("{fam}/{la}");
        if self.family == Family::ZerothOrder {
            s.push_str(match self.stats_mode {
                StatsMode::Raw => "/raw",
                StatsMode::Centered => "/centered",
                StatsMode::GroupNormalized => "/normalized",
            });
        }
        if self.splits > 1 {
            s.push_str(&format!("/splits-{}", self.splits));
        }
        if self.localize {
            s.push_str("/localized");
        }
        s
    }

    pub fn is_current_state(&self) -> bool {
        self.lookahead == LookaheadSpec::Current
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmseConfig {
    pub estimators: Vec<EstimatorSpec>,
    /// Explicit step indices; when empty, `step_fractions` of `N` are used.
    pub steps: Vec<usize>,
    pub step_fractions: Vec<f64>,
    /// Branching widths `K`, used when `nfe_budgets` is empty.
    pub sample_sizes: Vec<usize>,
    /// Score evaluations per estimate; `K` is then the largest width whose
    /// estimate fits the budget.
    pub nfe_budgets: Vec<u64>,
    /// Evaluation points drawn from the reference marginal per cell.
    pub n_points: usize,
    /// Independent estimates per evaluation point.
    pub repeats: usize,
    /// Replicate indices; every row is tagged with one of them.
    pub seeds: Vec<u64>,
    pub rollout_field: RolloutField,
    /// Record wall-clock time per cell (makes the CSV non-reproducible).
    pub record_wall_time: bool,
}

impl Default for RmseConfig {
    fn default() -> Self {
        Self {
            estimators: vec![
                EstimatorSpec::new(
                    "FO one-step",
                    Family::FirstOrder,
                    LookaheadSpec::OneStep,
                    StatsMode::Raw,
                ),
                EstimatorSpec::new("ZO full raw", Family::ZerothOrder, LookaheadSpec::Full, StatsMode::Raw),
                EstimatorSpec::new(
                    "ZO full centered",
                    Family::ZerothOrder,
                    LookaheadSpec::Full,
                    StatsMode::Centered,
                ),
            ],
            steps: Vec::new(),
            step_fractions: vec![0.2, 0.8],
            sample_sizes: vec![1, 4, 16, 64],
            nfe_budgets: Vec::new(),
            n_points: 64,
            repeats: 4,
            seeds: vec![0],
            rollout_field: RolloutField::Tilted,
            record_wall_time: false,
        }
    }
}

impl RmseConfig {
    /// Step indices in the order given by the configuration.
    pub fn step_indices(&self, n: usize) -> Vec<usize> {
        if !self.steps.is_empty() {
            return self.steps.clone();
        }
        self.step_fractions
            .iter()
            .map(|f| ((f * n as f64).round() as usize).clamp(1, n))
            .collect()
    }

    pub fn validate(&self, sched: &Schedule) -> Result<()> {
        let n = sched.n_steps();
        if self.estimators.is_empty() {
            return Err(BenchError::invalid("rmse.estimators is empty"));
        }
        for (a, e) in self.estimators.iter().enumerate() {
            if e.label.is_empty() || e.label.contains([',', '"', '\n']) {
                return Err(BenchError::invalid(format!(
                    "estimator label {:?} must be non-empty and free of commas, quotes and newlines",
                    e.label
                )));
            }
            if self.estimators[..a].iter().any(|o| o.label == e.label) {
                return Err(BenchError::invalid(format!("duplicate estimator label {:?}", e.label)));
            }
            if e.splits == 0 {
                return Err(BenchError::invalid(format!("{}: splits must be at least 1", e.label)));
            }
            if e.is_current_state() && e.family == Family::ZerothOrder {
                return Err(BenchError::invalid(format!(
                    "{}: the zeroth-order estimator needs a lookahead below the current step",
                    e.label
                )));
            }
        }
        if self.steps.is_empty() && self.step_fractions.is_empty() {
            return Err(BenchError::invalid("no evaluation steps"));
        }
        if self.step_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(BenchError::invalid("step fractions must lie in (0, 1]"));
        }
        for i in self.step_indices(n) {
            if i == 0 || i > n {
                return Err(BenchError::invalid(format!("step {i} outside 1..={n}")));
            }
            for e in &self.estimators {
                if e.is_current_state() {
                    continue;
                }
                if sched.step(i).sde.sigma <= 0.0 {
                    return Err(BenchError::invalid(format!(
                        "{}: step {i} is deterministic and cannot branch",
                        e.label
                    )));
                }
                let j = e.lookahead.node(i);
                if j >= i {
                    return Err(BenchError::invalid(format!(
                        "{}: lookahead node {j} not below step {i}",
                        e.label
                    )));
                }
                if e.splits > i - j {
                    return Err(BenchError::invalid(format!(
                        "{}: {} splits do not fit between steps {i} and {j}",
                        e.label, e.splits
                    )));
                }
                if e.splits > 1 {
                    for s in crate::rmse::split_steps(i, j, e.splits) {
                        if sched.step(s).sde.sigma <= 0.0 {
                            return Err(BenchError::invalid(format!(
                                "{}: split step {s} is deterministic",
                                e.label
                            )));
                        }
                    }
                }
            }
        }
        if self.nfe_budgets.is_empty() {
            if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
                return Err(BenchError::invalid(
                    "sample sizes must be a non-empty list of positive widths",
                ));
            }
        } else if self.nfe_budgets.contains(&0) {
            return Err(BenchError::invalid("NFE budgets must be positive"));
        }
        if self.n_points == 0 || self.repeats == 0 {
            return Err(BenchError::invalid("n_points and repeats must be positive"));
        }
        if self.n_points * self.repeats < 2 {
            return Err(BenchError::invalid("each cell needs at least two estimates"));
        }
        if self.seeds.is_empty() {
            return Err(BenchError::invalid("seeds is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Method labels; defaults to every named method.
    pub methods: Vec<String>,
    pub registry: RegistryOptions,
    /// Pairs of methods whose influence curves are searched for crossings.
    pub crossings: Vec<(String, String)>,
    pub log_y: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            methods: rsm_core::rsm_objective::MethodName::NAMED
                .iter()
                .map(|m| m.label().to_string())
                .collect(),
            registry: RegistryOptions::default(),
            crossings: vec![("REINFORCE_KL".into(), "PCPO_ReweightFlow".into())],
            log_y: true,
        }
    }
}

/// Fine-tuning method: a named registry row or the first-order
/// current-state preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum MethodChoice {
    Named {
        label: String,
    },
    /// `γ = 1`, `C1 = Ω²/(2σ²)`, `C2 = 0`, guidance from the Tweedie
    /// Jacobian at the current state.
    FirstOrderCurrentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Load the reference network instead of pretraining it.
    pub reference_checkpoint: Option<PathBuf>,
    pub pretrain: TrainConfig,
    /// Steps of the uniform grid used for denoising score matching.
    pub pretrain_grid_steps: usize,
    pub init_seed: u64,
    /// Upper bound on the mean final DSM loss; exceeded bounds abort.
    pub max_final_loss: Option<f64>,
    /// Coupled samples used for the Wasserstein check of the reference net.
    pub w2_samples: usize,
    pub method: MethodChoice,
    pub registry: RegistryOptions,
    pub clip: Option<ClipRule>,
    pub finetune: TrainConfig,
    pub options: FinetuneOptions,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            reference_checkpoint: None,
            pretrain: TrainConfig {
                batch: 4096,
                iters: 2000,
                lr: 2e-3,
                lr_min: Some(1e-5),
                ..TrainConfig::default()
            },
            pretrain_grid_steps: 500,
            init_seed: 1,
            max_final_loss: None,
            w2_samples: 2000,
            method: MethodChoice::Named {
                label: "REINFORCE_KL".into(),
            },
            registry: RegistryOptions::default(),
            clip: None,
            finetune: TrainConfig {
                batch: 512,
                iters: 100,
                lr: 1e-3,
                eval_every: 10,
                seed: 3,
                ..TrainConfig::default()
            },
            options: FinetuneOptions::default(),
        }
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<()> {
        if let MethodChoice::Named { label } = &self.method {
            if rsm_core::rsm_objective::MethodName::from_label(label).is_none() {
                return Err(BenchError::invalid(format!("unknown method {label:?}")));
            }
        }
        if self.reference_checkpoint.is_none() {
            self.pretrain.validate().map_err(invalid)?;
            if self.pretrain_grid_steps == 0 {
                return Err(BenchError::invalid("pretrain_grid_steps must be positive"));
            }
        }
        self.finetune.validate().map_err(invalid)?;
        if let Some(c) = &self.clip {
            c.validate().map_err(invalid)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// Random instances per kernel check.
    pub instances: usize,
    /// Also audit the three canonical samplers (DDIM and DPM-Solver++ on VP,
    /// Euler on rectified flow), not only the configured schedule.
    pub include_canonical: bool,
    /// Multiplies every Ω before the checks; anything but 1 is a fault.
    pub omega_scale: f64,
    pub kernel_rtol: f64,
    pub identity_tol: f64,
    pub oracle_tol: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            include_canonical: true,
            omega_scale: 1.0,
            kernel_rtol: 1e-10,
            identity_tol: 1e-12,
            oracle_tol: 1e-6,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(BenchError::invalid("audit.instances must be positive"));
        }
        if !(self.omega_scale.is_finite() && self.omega_scale > 0.0) {
            return Err(BenchError::invalid("audit.omega_scale must be positive"));
        }
        Ok(())
    }
}
