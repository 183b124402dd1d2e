//! Pretraining of the reference network and RSM fine-tuning on the toy.

use std::sync::Arc;

use rsm_core::flow_schedules::{Schedule, TimeGrid};
use rsm_core::rsm_objective::{
    named_config, ClipRule, EstimatorFamily, Lookahead, MethodConfig, MethodName, RegistryOptions,
};
use rsm_core::sampler::{MixtureField, RolloutPlan};
use rsm_core::training::{coupled_w2, pretrain, rsm_finetune, FinetuneResult, MetricsRow, NetField, ScoreNet};

use crate::config::{ExperimentConfig, MethodChoice, TrainSection};
use crate::error::{BenchError, Result};
use crate::output::fmt_f64;

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "reward_mean",
    "reward_se",
    "reward_smoothed",
    "kl_proxy",
    "drift",
    "clip_fraction",
    "loss_finite",
];

#[derive(Debug, Clone)]
pub struct ReferenceNet {
    pub net: ScoreNet,
    /// Mean DSM loss over the last tenth of pretraining; `None` when loaded.
    pub final_loss: Option<f64>,
    /// Coupled-sample bound on the 2-Wasserstein distance to the exact
    /// reference sampler; `None` when disabled.
    pub w2_bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reference: ReferenceNet,
    pub method: MethodConfig,
    pub result: FinetuneResult,
    pub smoothed: Vec<f64>,
}

impl TrainOutcome {
    pub fn metrics_records(&self) -> Vec<Vec<String>> {
        let finite = self.result.aborted.is_none();
        self.result
            .metrics
            .iter()
            .zip(&self.smoothed)
            .map(|(m, s): (&MetricsRow, &f64)| {
                vec![
                    m.epoch.to_string(),
                    fmt_f64(m.reward_mean),
                    fmt_f64(m.reward_se),
                    fmt_f64(*s),
                    fmt_f64(m.kl_proxy),
                    fmt_f64(m.drift),
                    fmt_f64(m.clip_fraction),
                    finite.to_string(),
                ]
            })
            .collect()
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.smoothed.last().copied()
    }
}

/// The first-order current-state preset: `γ = 1`, `C1 = Ω²/(2σ²)`, `C2 = 0`.
pub fn first_order_current_state(schedule: &Schedule, alpha: f64, clip: ClipRule) -> Result<MethodConfig> {
    let n = schedule.n_steps();
    let mut gamma = vec![1.0; n + 1];
    gamma[0] = 0.0;
    let c1: Vec<f64> = (0..=n)
        .map(|i| {
            if i == 0 {
                return 0.0;
            }
            let k = schedule.step(i).sde;
            if k.sigma > 0.0 {
                0.5 * k.omega * k.omega / (k.sigma * k.sigma)
            } else {
                0.0
            }
        })
        .collect();
    Ok(MethodConfig::custom(
        Lookahead::Current,
        EstimatorFamily::FirstOrder,
        false,
        gamma,
        c1,
        vec![0.0; n + 1],
        false,
        clip,
        alpha,
    )?)
}

pub fn method_config(section: &TrainSection, schedule: &Schedule, alpha: f64) -> Result<MethodConfig> {
    match &section.method {
        MethodChoice::Named { label } => {
            let name = MethodName::from_label(label)
                .filter(|m| *m != MethodName::Custom)
                .ok_or_else(|| BenchError::invalid(format!("unknown method {label:?}")))?;
            let opts = RegistryOptions {
                alpha,
                clip: section.clip.or(section.registry.clip),
                ..section.registry.clone()
            };
            named_config(name, schedule, &opts).map_err(|e| BenchError::invalid(format!("{label}: {e}")))
        }
        MethodChoice::FirstOrderCurrentState => {
            first_order_current_state(schedule, alpha, section.clip.unwrap_or(ClipRule::None))
                .map_err(|e| BenchError::invalid(e.to_string()))
        }
    }
}

/// Pretrains (or loads) the reference network and measures its sampler
/// against the exact reference on the configured schedule.
pub fn reference_net(cfg: &ExperimentConfig) -> Result<ReferenceNet> {
    let section = &cfg.train;
    let schedule = Arc::new(cfg.setup.schedule()?);
    let pair = cfg.setup.pair()?;
    let (net, final_loss) = match &section.reference_checkpoint {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
                path: path.display().to_string(),
                source,
            })?;
            (
                ScoreNet::from_json(&text).map_err(|e| BenchError::invalid(e.to_string()))?,
                None,
            )
        }
        None => {
            let grid =
                TimeGrid::uniform(section.pretrain_grid_steps).map_err(|e| BenchError::invalid(e.to_string()))?;
            let res = pretrain(
                ScoreNet::init(section.init_seed),
                &pair.reference,
                &schedule.flow,
                &grid,
                &section.pretrain,
                section.max_final_loss,
            )?;
            let tail = (res.losses.len() / 10).max(1).min(res.losses.len());
            let final_loss =
                (tail > 0).then(|| res.losses[res.losses.len() - tail..].iter().sum::<f64>() / tail as f64);
            (res.net, final_loss)
        }
    };
    let w2_bound = if section.w2_samples > 0 {
        let ode = RolloutPlan::ode(schedule.clone());
        let learned = NetField::for_plan(&net, &ode)?;
        let exact = MixtureField::new(&pair.reference, &schedule)?;
        Some(coupled_w2(&learned, &exact, &ode, section.w2_samples, cfg.seed)?)
    } else {
        None
    };
    Ok(ReferenceNet {
        net,
        final_loss,
        w2_bound,
    })
}

/// Fine-tunes a copy of `reference` with the configured method.
pub fn finetune_from(cfg: &ExperimentConfig, reference: ReferenceNet) -> Result<TrainOutcome> {
    let section = &cfg.train;
    let schedule = Arc::new(cfg.setup.schedule()?);
    let pair = cfg.setup.pair()?;
    let method = method_config(section, &schedule, cfg.setup.alpha)?;
    let plan = RolloutPlan::full(schedule.clone());
    let result = rsm_finetune(
        &reference.net,
        reference.net.clone(),
        &pair,
        &method,
        &plan,
        &section.finetune,
        &section.options,
    )?;
    let smoothed = result.smoothed_rewards(section.options.smoothing_window);
    Ok(TrainOutcome {
        reference,
        method,
        result,
        smoothed,
    })
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let reference = reference_net(cfg)?;
    finetune_from(cfg, reference)
}
