//! Estimator accuracy against the exact optimal guidance.
//!
//! A cell is one (estimator, step, width or budget) combination under one
//! replicate seed. Each cell draws `n_points` states from the reference
//! marginal at step `i`, forms `repeats` independent estimates at each, and
//! summarises the errors `Ψ̂ − Ψ*` by their RMS, the norm of their mean and
//! the trace of their (population) covariance, so that
//! `rmse² = bias_norm² + var_trace` holds up to rounding.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use rsm_core::estimators::{psi_cs_first_order, psi_la_first_order, psi_la_zeroth_order, GuidanceEstimate};
use rsm_core::flow_schedules::Schedule;
use rsm_core::mixture_oracle::{psi_star, TiltedPair};
use rsm_core::rng;
use rsm_core::sampler::{rollout, CountingField, MixtureField, RolloutPlan, ScoreField};
use rsm_core::vec2;
use rsm_core::Vec2;

use crate::config::{EstimatorSpec, ExperimentConfig, Family, RmseConfig, RolloutField};
use crate::error::{BenchError, Result};
use crate::output::fmt_f64;

pub const HEADER: [&str; 14] = [
    "experiment_id",
    "method",
    "estimator",
    "i",
    "t",
    "j",
    "K",
    "n_samples",
    "seed",
    "rmse",
    "bias_norm",
    "var_trace",
    "wall_ns",
    "nfe",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment_id: String,
    pub method: String,
    pub estimator: String,
    pub i: usize,
    pub t: f64,
    pub j: usize,
    pub k: usize,
    /// Leaves (terms) per estimate.
    pub n_samples: usize,
    pub seed: u64,
    pub rmse: f64,
    pub bias_norm: f64,
    pub var_trace: f64,
    pub wall_ns: u64,
    /// Score evaluations per estimate, counted on the field.
    pub nfe: u64,
    /// NFE budget of the cell, when budgets drive the widths.
    pub budget: Option<u64>,
}

impl ResultRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.experiment_id.clone(),
            self.method.clone(),
            self.estimator.clone(),
            self.i.to_string(),
            fmt_f64(self.t),
            self.j.to_string(),
            self.k.to_string(),
            self.n_samples.to_string(),
            self.seed.to_string(),
            fmt_f64(self.rmse),
            fmt_f64(self.bias_norm),
            fmt_f64(self.var_trace),
            self.wall_ns.to_string(),
            self.nfe.to_string(),
        ]
    }
}

/// Error summary of a set of estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub rmse: f64,
    pub bias_norm: f64,
    pub var_trace: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[Vec2]) -> Self {
        let m = vec2::mean2(errors);
        let sq: Vec<f64> = errors.iter().map(|e| vec2::norm_sq(*e)).collect();
        let dev: Vec<f64> = errors.iter().map(|e| vec2::norm_sq(vec2::sub(*e, m))).collect();
        Self {
            rmse: vec2::mean(&sq).sqrt(),
            bias_norm: vec2::norm_sq(m).sqrt(),
            var_trace: vec2::mean(&dev),
        }
    }
}

/// Branching stages from `i` towards `j`: `i − ⌊k(i − j)/s⌋` for `k < s`.
pub fn split_steps(i: usize, j: usize, splits: usize) -> Vec<usize> {
    (0..splits).map(|k| i - k * (i - j) / splits).collect()
}

/// The rollout plan of `spec` at step `i` with width `k` at every stage.
pub fn plan_for(spec: &EstimatorSpec, schedule: &Arc<Schedule>, i: usize, k: usize) -> RolloutPlan {
    let j = spec.lookahead.node(i);
    let mut plan = RolloutPlan::full(schedule.clone()).with_lookahead(j);
    let stages = split_steps(i, j, spec.splits);
    if spec.localize {
        let mut mask = vec![false; schedule.n_steps() + 1];
        for &s in &stages {
            mask[s] = true;
        }
        plan = plan.with_mask(mask);
    }
    for s in stages {
        plan = plan.with_branch(s, k);
    }
    plan
}

/// One estimate of `Ψ(x)` at step `i`.
#[allow(clippy::too_many_arguments)]
pub fn estimate(
    spec: &EstimatorSpec,
    plan: &RolloutPlan,
    i: usize,
    x: Vec2,
    field: &dyn ScoreField,
    pair: &TiltedPair,
    key: u64,
) -> rsm_core::Result<GuidanceEstimate> {
    let j = plan.lookahead;
    match spec.family {
        Family::FirstOrder if spec.is_current_state() => {
            psi_cs_first_order(x, i, field, &plan.schedule, &pair.reward, pair.alpha)
        }
        Family::FirstOrder => {
            let tree = rollout(x, i, plan, field, key)?;
            psi_la_first_order(&tree, i, j, plan, field, &pair.reward, pair.alpha)
        }
        Family::ZerothOrder => {
            let mut tree = rollout(x, i, plan, field, key)?;
            tree.score_rewards(&pair.reward);
            psi_la_zeroth_order(&tree, i, j, plan, pair.alpha, spec.stats_mode)
        }
    }
}

/// Score evaluations of one estimate of `spec` at width `k`.
pub fn estimate_cost(
    spec: &EstimatorSpec,
    schedule: &Arc<Schedule>,
    i: usize,
    k: usize,
    field: &dyn ScoreField,
    pair: &TiltedPair,
) -> rsm_core::Result<u64> {
    let counter = CountingField::new(field);
    let plan = plan_for(spec, schedule, i, k);
    estimate(spec, &plan, i, [0.0, 0.0], &counter, pair, 0)?;
    Ok(counter.calls())
}

/// Largest width whose estimate costs at most `budget` evaluations.
pub fn width_for_budget(
    spec: &EstimatorSpec,
    schedule: &Arc<Schedule>,
    i: usize,
    budget: u64,
    field: &dyn ScoreField,
    pair: &TiltedPair,
) -> Result<usize> {
    if spec.is_current_state() {
        return Ok(1);
    }
    let cost = |k: usize| estimate_cost(spec, schedule, i, k, field, pair);
    if cost(1)? > budget {
        return Err(BenchError::invalid(format!(
            "{}: a single branch at step {i} costs {} evaluations, above the budget {budget}",
            spec.label,
            cost(1)?
        )));
    }
    let mut lo = 1usize;
    let mut hi = 2usize;
    while cost(hi)? <= budget {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cost(mid)? <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

struct Cell<'a> {
    spec: &'a EstimatorSpec,
    i: usize,
    k: usize,
    budget: Option<u64>,
    seed: u64,
}

/// Runs every cell and returns rows ordered by (estimator, step, width or
/// budget, seed).
pub fn run_rmse_bench(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let rc: &RmseConfig = &cfg.rmse;
    let schedule = Arc::new(cfg.setup.schedule()?);
    rc.validate(&schedule)?;
    let pair = cfg.setup.pair()?;
    let flow = &schedule.flow;
    let rollout_mixture = match rc.rollout_field {
        RolloutField::Tilted => &pair.target,
        RolloutField::Reference => &pair.reference,
    };
    let field = MixtureField::new(rollout_mixture, &schedule)?;
    let reference = MixtureField::new(&pair.reference, &schedule)?;
    let steps = rc.step_indices(schedule.n_steps());

    let mut cells = Vec::new();
    for spec in &rc.estimators {
        for &i in &steps {
            let widths: Vec<(usize, Option<u64>)> = if spec.is_current_state() {
                match rc.nfe_budgets.first() {
                    Some(&b) => vec![(1, Some(b))],
                    None => vec![(1, None)],
                }
            } else if rc.nfe_budgets.is_empty() {
                rc.sample_sizes.iter().map(|&k| (k, None)).collect()
            } else {
                rc.nfe_budgets
                    .iter()
                    .map(|&b| Ok((width_for_budget(spec, &schedule, i, b, &field, &pair)?, Some(b))))
                    .collect::<Result<_>>()?
            };
            for (k, budget) in widths {
                for &seed in &rc.seeds {
                    cells.push(Cell {
                        spec,
                        i,
                        k,
                        budget,
                        seed,
                    });
                }
            }
        }
    }

    let run = |cell: &Cell| -> Result<ResultRow> {
        let started = Instant::now();
        let Cell {
            spec,
            i,
            k,
            budget,
            seed,
        } = *cell;
        let plan = plan_for(spec, &schedule, i, k);
        let counter = CountingField::new(&field);
        let t = schedule.grid.t(i);
        let mut errors = Vec::with_capacity(rc.n_points * rc.repeats);
        let mut n_samples = 0;
        for p in 0..rc.n_points {
            let mut r = rng::stream(rng::key_from_path(cfg.seed, &[seed, i as u64, p as u64]));
            let x = reference.marginal(i).sample(&mut r);
            let target = psi_star(&pair, flow, t, x)?;
            for rep in 0..rc.repeats {
                let key = rng::key_from_path(cfg.seed, &[seed, i as u64, p as u64, rep as u64, 1]);
                let est = estimate(spec, &plan, i, x, &counter, &pair, key)?;
                n_samples = est.n_samples;
                errors.push(vec2::sub(est.value, target));
            }
        }
        let stats = ErrorStats::from_errors(&errors);
        let estimates = errors.len() as u64;
        let calls = counter.calls();
        debug_assert_eq!(calls % estimates, 0);
        Ok(ResultRow {
            experiment_id: cfg.experiment_id.clone(),
            method: spec.label.clone(),
            estimator: spec.descriptor(),
            i,
            t,
            j: plan.lookahead,
            k,
            n_samples,
            seed,
            rmse: stats.rmse,
            bias_norm: stats.bias_norm,
            var_trace: stats.var_trace,
            wall_ns: if rc.record_wall_time {
                started.elapsed().as_nanos() as u64
            } else {
                0
            },
            nfe: calls / estimates,
            budget,
        })
    };
    cells.par_iter().map(run).collect()
}

pub fn rows_to_records(rows: &[ResultRow]) -> Vec<Vec<String>> {
    rows.iter().map(ResultRow::record).collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = vec2::mean(&lx);
    let my = vec2::mean(&ly);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
