//! Estimators of the optimal value guidance `Ψ*`.
//!
//! | estimator | reads reward at | signal |
//! |---|---|---|
//! | current-state first order | `x̂_{0|t_i}` | `(1/α) ∇_{x_{t_i}} r(x̂_0)` |
//! | lookahead first order | `x̂_{0|t_j}` | `σ²/(αΩ) · mean_k ∇_{x_{t_{i−1}}} r(x̂_{0|t_j}^{(k)})` |
//! | lookahead zeroth order | `x̂_{0|t_j}` | `σ/(αΩ) · mean_k A^{(k)} ε^{(k)}_{t_i}` |
//!
//! Rewards entering the zeroth-order form pass through [`RewardStats`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::flow_schedules::Schedule;
use crate::mixture_oracle::{tweedie, LinearReward};
use crate::sampler::{resimulate, tweedie_at, BranchTree, RolloutPlan, ScoreField};
use crate::vec2::{self, Mat2, Vec2};
use crate::{Error, Result};

/// Central-difference step for Jacobians.
pub const FD_STEP: f64 = 1e-4;
/// Floor on the group standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// A guidance estimate and the per-sample terms it averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEstimate {
    pub value: Vec2,
    pub n_samples: usize,
    pub terms: Vec<Vec2>,
}

impl GuidanceEstimate {
    pub fn from_terms(terms: Vec<Vec2>) -> Self {
        Self {
            value: vec2::mean2(&terms),
            n_samples: terms.len(),
            terms,
        }
    }

    /// Pools the terms of several estimates.
    pub fn pooled(parts: impl IntoIterator<Item = GuidanceEstimate>) -> Self {
        let terms: Vec<Vec2> = parts.into_iter().flat_map(|p| p.terms).collect();
        Self::from_terms(terms)
    }

    /// Unbiased per-coordinate variance of the terms.
    pub fn term_variance(&self) -> Vec2 {
        let n = self.terms.len();
        if n < 2 {
            return [0.0, 0.0];
        }
        let m = self.value;
        let sq: Vec<Vec2> = self
            .terms
            .iter()
            .map(|t| {
                let d = vec2::sub(*t, m);
                [d[0] * d[0], d[1] * d[1]]
            })
            .collect();
        vec2::scale(vec2::pairwise_sum2(&sq), 1.0 / (n - 1) as f64)
    }

    /// Per-coordinate standard error of `value`.
    pub fn standard_error(&self) -> Vec2 {
        let v = self.term_variance();
        let n = self.terms.len().max(1) as f64;
        [(v[0] / n).sqrt(), (v[1] / n).sqrt()]
    }
}

/// How raw rewards are turned into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatsMode {
    Raw,
    Centered,
    GroupNormalized,
}

/// Group reward statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub raw: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 convention).
    pub std: f64,
    pub mode: StatsMode,
    /// Set when normalisation was requested on a group with zero spread and
    /// centering was used instead.
    pub degenerate: bool,
}

impl RewardStats {
    /// Per-sample weights `A^{(k)}`.
    pub fn advantages(&self) -> Vec<f64> {
        match self.mode {
            StatsMode::Raw => self.raw.clone(),
            StatsMode::Centered => self.raw.iter().map(|r| r - self.mean).collect(),
            StatsMode::GroupNormalized => {
                let s = self.std.max(STD_FLOOR);
                self.raw.iter().map(|r| (r - self.mean) / s).collect()
            }
        }
    }
}

/// Statistics of `rewards` under `mode`.
pub fn reward_stats(rewards: &[f64], mode: StatsMode) -> RewardStats {
    let mean = vec2::mean(rewards);
    let n = rewards.len();
    let std = if n > 1 {
        let sq: Vec<f64> = rewards.iter().map(|r| (r - mean) * (r - mean)).collect();
        (vec2::pairwise_sum(&sq) / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let (mode, degenerate) = if mode == StatsMode::GroupNormalized && std == 0.0 {
        (StatsMode::Centered, true)
    } else {
        (mode, false)
    };
    RewardStats {
        raw: rewards.to_vec(),
        mean,
        std,
        mode,
        degenerate,
    }
}

/// A correction added to first-order estimates; the laboratory only uses
/// [`ZeroResidual`].
pub trait ResidualField {
    fn residual(&self, x: Vec2, i: usize) -> Vec2;
}

pub struct ZeroResidual;

impl ResidualField for ZeroResidual {
    fn residual(&self, _x: Vec2, _i: usize) -> Vec2 {
        [0.0, 0.0]
    }
}

/// Jacobian of `x ↦ x̂_{0|t_i}(x)`: closed form when the field provides it,
/// otherwise central differences (four score evaluations).
pub fn tweedie_jacobian(x: Vec2, i: usize, field: &dyn ScoreField, schedule: &Schedule) -> Result<Mat2> {
    if let Some(j) = field.tweedie_jacobian(x, i) {
        return Ok(j);
    }
    let (a, b) = schedule.ab(i);
    let mut jac = [[0.0; 2]; 2];
    for col in 0..2 {
        let mut xp = x;
        let mut xm = x;
        xp[col] += FD_STEP;
        xm[col] -= FD_STEP;
        let tp = tweedie(xp, field.score(xp, i), a, b)?;
        let tm = tweedie(xm, field.score(xm, i), a, b)?;
        for row in 0..2 {
            jac[row][col] = (tp[row] - tm[row]) / (2.0 * FD_STEP);
        }
    }
    Ok(jac)
}

/// Current-state first-order estimate `(1/α) J_Tweedieᵀ c`.
pub fn psi_cs_first_order(
    x_t: Vec2,
    i: usize,
    field: &dyn ScoreField,
    schedule: &Schedule,
    reward: &LinearReward,
    alpha: f64,
) -> Result<GuidanceEstimate> {
    psi_cs_first_order_with(x_t, i, field, schedule, reward, alpha, &ZeroResidual)
}

/// [`psi_cs_first_order`] plus a residual correction.
pub fn psi_cs_first_order_with(
    x_t: Vec2,
    i: usize,
    field: &dyn ScoreField,
    schedule: &Schedule,
    reward: &LinearReward,
    alpha: f64,
    residual: &dyn ResidualField,
) -> Result<GuidanceEstimate> {
    check_alpha(alpha)?;
    let (a, _) = schedule.ab(i);
    if !(a > 0.0) {
        return Err(Error::Singular(format!("a_t = {a} at step {i}")));
    }
    let jac = tweedie_jacobian(x_t, i, field, schedule)?;
    let g = vec2::scale(vec2::mat_t_vec(jac, reward.grad()), 1.0 / alpha);
    Ok(GuidanceEstimate::from_terms(vec![vec2::add(
        g,
        residual.residual(x_t, i),
    )]))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "alpha",
            value: alpha,
            domain: "(0, ∞)",
        })
    }
}

fn check_tree(tree: &BranchTree, i: usize, j: usize, plan: &RolloutPlan) -> Result<()> {
    if j + 1 > i {
        return Err(Error::Contract(format!(
            "lookahead j = {j} must satisfy j <= i - 1 = {}; use the current-state estimator",
            i as i64 - 1
        )));
    }
    if tree.root_step != i || tree.lookahead != j {
        return Err(Error::Contract(format!(
            "tree spans {}→{} but the estimate asks for {i}→{j}",
            tree.root_step, tree.lookahead
        )));
    }
    if plan.coeffs(i).sigma <= 0.0 {
        return Err(Error::Contract(format!("step {i} is deterministic")));
    }
    Ok(())
}

/// Lookahead first-order estimate. Each leaf's reward gradient with respect
/// to its branch state `x_{t_{i−1}}` is obtained by re-simulating the leaf's
/// frozen-noise path from perturbed starts (central differences).
pub fn psi_la_first_order(
    tree: &BranchTree,
    i: usize,
    j: usize,
    plan: &RolloutPlan,
    field: &dyn ScoreField,
    reward: &LinearReward,
    alpha: f64,
) -> Result<GuidanceEstimate> {
    check_alpha(alpha)?;
    check_tree(tree, i, j, plan)?;
    let coeffs = plan.coeffs(i);
    let scale = coeffs.sigma * coeffs.sigma / (alpha * coeffs.omega);
    let mut terms = Vec::with_capacity(tree.leaves.len());
    for leaf in &tree.leaves {
        let path = tree.path_from_branch(leaf);
        let start = tree.nodes[path[0]].x;
        let eps: Vec<Option<Vec2>> = path[1..].iter().map(|&id| tree.nodes[id].eps).collect();
        let value = |x: Vec2| -> Result<f64> {
            let end = resimulate(x, i - 1, j, &eps, plan, field)?;
            Ok(reward.eval(tweedie_at(end, j, plan, field)?))
        };
        let mut grad = [0.0; 2];
        for d in 0..2 {
            let mut xp = start;
            let mut xm = start;
            xp[d] += FD_STEP;
            xm[d] -= FD_STEP;
            grad[d] = (value(xp)? - value(xm)?) / (2.0 * FD_STEP);
        }
        terms.push(vec2::scale(grad, scale));
    }
    Ok(GuidanceEstimate::from_terms(terms))
}

/// Lookahead zeroth-order estimate `σ/(αΩ) · mean_k A^{(k)} ε_{t_i}^{(k)}`.
/// Leaves must carry rewards.
pub fn psi_la_zeroth_order(
    tree: &BranchTree,
    i: usize,
    j: usize,
    plan: &RolloutPlan,
    alpha: f64,
    mode: StatsMode,
) -> Result<GuidanceEstimate> {
    check_alpha(alpha)?;
    check_tree(tree, i, j, plan)?;
    let coeffs = plan.coeffs(i);
    let scale = coeffs.sigma / (alpha * coeffs.omega);
    let mut rewards = Vec::with_capacity(tree.leaves.len());
    let mut noises = Vec::with_capacity(tree.leaves.len());
    for leaf in &tree.leaves {
        rewards.push(
            leaf.reward
                .ok_or_else(|| Error::Contract("leaf without a reward".into()))?,
        );
        let branch = tree.path_from_branch(leaf)[0];
        noises.push(
            tree.nodes[branch]
                .eps
                .ok_or_else(|| Error::Contract("branch edge without recorded noise".into()))?,
        );
    }
    let adv = reward_stats(&rewards, mode).advantages();
    let terms = adv
        .iter()
        .zip(&noises)
        .map(|(a, e)| vec2::scale(*e, scale * a))
        .collect();
    Ok(GuidanceEstimate::from_terms(terms))
}

/// Zeroth-order ascent in noise space:
/// `ĝ = mean_k (r(D(z + σε_k)) − r(D(z))) ε_k / σ`, returning `(z + lr·ĝ, ĝ)`.
#[allow(clippy::too_many_arguments)]
pub fn dno_noise_update<R: Rng + ?Sized>(
    z: Vec2,
    decoder: &dyn Fn(Vec2) -> Vec2,
    reward: &LinearReward,
    sigma_perturb: f64,
    k: usize,
    lr: f64,
    rng: &mut R,
) -> Result<(Vec2, GuidanceEstimate)> {
    if !(sigma_perturb > 0.0) {
        return Err(Error::Domain {
            what: "sigma_perturb",
            value: sigma_perturb,
            domain: "(0, ∞)",
        });
    }
    if k == 0 {
        return Err(Error::Contract("at least one perturbation is needed".into()));
    }
    let base = reward.eval(decoder(z));
    let terms: Vec<Vec2> = (0..k)
        .map(|_| {
            let e = crate::rng::normal2(rng);
            let r = reward.eval(decoder(vec2::axpy(z, sigma_perturb, e)));
            vec2::scale(e, (r - base) / sigma_perturb)
        })
        .collect();
    let est = GuidanceEstimate::from_terms(terms);
    Ok((vec2::axpy(z, lr, est.value), est))
}
