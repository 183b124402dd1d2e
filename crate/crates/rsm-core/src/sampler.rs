//! Reverse-time rollouts over the affine kernel, recorded as branching trees.
//!
//! Every node owns a 64-bit stream key derived from its parent's key and its
//! sibling index, and its injected noise is drawn from that key alone. A
//! branch can therefore be regenerated without touching its siblings, and a
//! child state can be recomputed bit-exactly from `(parent, ε)`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::flow_schedules::{KernelCoeffs, Schedule};
use crate::mixture_oracle::{marginal_at, score, tweedie, GaussianMixture, LinearReward};
use crate::rng;
use crate::vec2::{self, Mat2, Vec2};
use crate::{Error, Result};

/// A score evaluated at grid node `i` (time `t_i`).
pub trait ScoreField: Sync {
    fn score(&self, x: Vec2, i: usize) -> Vec2;

    /// Exact Jacobian of `x ↦ (x + b_i² s(x, i))/a_i` when known in closed form.
    fn tweedie_jacobian(&self, _x: Vec2, _i: usize) -> Option<Mat2> {
        None
    }
}

impl<F: ScoreField + ?Sized> ScoreField for &F {
    fn score(&self, x: Vec2, i: usize) -> Vec2 {
        (**self).score(x, i)
    }
    fn tweedie_jacobian(&self, x: Vec2, i: usize) -> Option<Mat2> {
        (**self).tweedie_jacobian(x, i)
    }
}

/// Exact score of a mixture's noised marginals on a schedule's grid.
#[derive(Debug, Clone)]
pub struct MixtureField {
    marginals: Vec<GaussianMixture>,
    ab: Vec<(f64, f64)>,
    base_var: f64,
}

impl MixtureField {
    pub fn new(gmm: &GaussianMixture, schedule: &Schedule) -> Result<Self> {
        let marginals = schedule
            .grid
            .times()
            .iter()
            .map(|&t| marginal_at(gmm, &schedule.flow, t))
            .collect::<Result<Vec<_>>>()?;
        let ab = (0..=schedule.n_steps()).map(|i| schedule.ab(i)).collect();
        Ok(Self {
            marginals,
            ab,
            base_var: gmm.component_var,
        })
    }

    pub fn marginal(&self, i: usize) -> &GaussianMixture {
        &self.marginals[i]
    }
}

impl ScoreField for MixtureField {
    fn score(&self, x: Vec2, i: usize) -> Vec2 {
        score(&self.marginals[i], x)
    }

    fn tweedie_jacobian(&self, _x: Vec2, i: usize) -> Option<Mat2> {
        if self.marginals[i].n_components() != 1 {
            return None;
        }
        let (a, b) = self.ab[i];
        let g = a * self.base_var / (a * a * self.base_var + b * b);
        Some([[g, 0.0], [0.0, g]])
    }
}

/// Wraps a field and counts evaluations.
pub struct CountingField<F> {
    inner: F,
    calls: AtomicU64,
}

impl<F: ScoreField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<F: ScoreField> ScoreField for CountingField<F> {
    fn score(&self, x: Vec2, i: usize) -> Vec2 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(x, i)
    }
    fn tweedie_jacobian(&self, x: Vec2, i: usize) -> Option<Mat2> {
        self.inner.tweedie_jacobian(x, i)
    }
}

/// Which steps inject noise, where the rollout branches, and where rewards
/// are read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutPlan {
    pub schedule: Arc<Schedule>,
    /// Indexed by step `i ∈ 0..=N`; entry 0 is unused.
    pub stochastic_mask: Vec<bool>,
    /// Indexed by step `i ∈ 0..=N`; entry 0 is unused.
    pub branch_widths: Vec<usize>,
    /// Grid node `j` at which leaves stop.
    pub lookahead: usize,
}

impl RolloutPlan {
    /// Every step stochastic, no branching, full rollout.
    pub fn full(schedule: Arc<Schedule>) -> Self {
        let n = schedule.n_steps();
        Self {
            schedule,
            stochastic_mask: vec![true; n + 1],
            branch_widths: vec![1; n + 1],
            lookahead: 0,
        }
    }

    /// Every step deterministic.
    pub fn ode(schedule: Arc<Schedule>) -> Self {
        let mut p = Self::full(schedule);
        p.stochastic_mask.iter_mut().for_each(|m| *m = false);
        p
    }

    pub fn with_branch(mut self, i: usize, k: usize) -> Self {
        self.branch_widths[i] = k;
        self
    }

    pub fn with_lookahead(mut self, j: usize) -> Self {
        self.lookahead = j;
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.stochastic_mask = mask;
        self
    }

    pub fn n_steps(&self) -> usize {
        self.schedule.n_steps()
    }

    /// The kernel actually used at step `i` under the mask.
    pub fn coeffs(&self, i: usize) -> &KernelCoeffs {
        let s = self.schedule.step(i);
        if self.stochastic_mask[i] {
            &s.sde
        } else {
            &s.ode
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_steps();
        if self.stochastic_mask.len() != n + 1 || self.branch_widths.len() != n + 1 {
            return Err(Error::Config(format!("plan arrays must have length N + 1 = {}", n + 1)));
        }
        if self.lookahead > n {
            return Err(Error::Config(format!("lookahead {} beyond N = {n}", self.lookahead)));
        }
        for i in 1..=n {
            let k = self.branch_widths[i];
            if k == 0 {
                return Err(Error::Config(format!("branch width at step {i} is zero")));
            }
            if k > 1 && self.coeffs(i).sigma == 0.0 {
                return Err(Error::Config(format!(
                    "step {i} branches (K = {k}) but is deterministic"
                )));
            }
        }
        Ok(())
    }
}

/// One recorded state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub x: Vec2,
    /// Grid node index of `x`.
    pub step: usize,
    pub parent: Option<usize>,
    /// Noise injected on the edge from the parent, if that edge was stochastic.
    pub eps: Option<Vec2>,
    /// Index of the root child this node descends from.
    pub branch: Option<usize>,
    pub key: u64,
}

/// Terminal or lookahead payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub node: usize,
    /// State at the lookahead node `j`.
    pub x_j: Vec2,
    /// Posterior-mean estimate at `j`.
    pub x0_hat: Vec2,
    pub reward: Option<f64>,
}

/// Flat arena of nodes with parent links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchTree {
    pub nodes: Vec<Node>,
    pub leaves: Vec<Leaf>,
    pub root_step: usize,
    pub lookahead: usize,
    /// Score evaluations spent building the tree.
    pub nfe: u64,
}

impl BranchTree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Number of children of the root.
    pub fn root_width(&self) -> usize {
        self.nodes.iter().filter(|n| n.parent == Some(0)).count()
    }

    /// Fills `reward` on every leaf from `x0_hat`.
    pub fn score_rewards(&mut self, reward: &LinearReward) {
        for leaf in &mut self.leaves {
            leaf.reward = Some(reward.eval(leaf.x0_hat));
        }
    }

    /// Node ids from the root child down to `leaf.node`.
    pub fn path_from_branch(&self, leaf: &Leaf) -> Vec<usize> {
        let mut path = Vec::new();
        let mut id = leaf.node;
        while let Some(p) = self.nodes[id].parent {
            path.push(id);
            id = p;
        }
        path.reverse();
        path
    }

    /// Recomputes node `id` from its parent state and stored noise.
    pub fn recompute(&self, id: usize, plan: &RolloutPlan, field: &dyn ScoreField) -> Result<Vec2> {
        let node = &self.nodes[id];
        let parent = node
            .parent
            .ok_or_else(|| Error::Contract("the root has no parent".into()))?;
        let p = &self.nodes[parent];
        let s = field.score(p.x, p.step);
        reverse_step(p.x, plan.coeffs(p.step), s, node.eps)
    }

    /// JSON dump for debugging.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serialises")
    }
}

/// `κx + Ωs + σε`; `eps` must be present exactly when `σ > 0`.
pub fn reverse_step(x: Vec2, coeffs: &KernelCoeffs, s: Vec2, eps: Option<Vec2>) -> Result<Vec2> {
    let mean = vec2::axpy(vec2::scale(x, coeffs.kappa), coeffs.omega, s);
    match (coeffs.sigma > 0.0, eps) {
        (true, Some(e)) => Ok(vec2::axpy(mean, coeffs.sigma, e)),
        (false, None) => Ok(mean),
        (true, None) => Err(Error::Contract("stochastic step needs a noise sample".into())),
        (false, Some(_)) => Err(Error::Contract("noise supplied to a deterministic step".into())),
    }
}

/// Posterior mean at node `j` from state `x`, spending one score evaluation
/// unless `b_j = 0`.
pub fn tweedie_at(x: Vec2, j: usize, plan: &RolloutPlan, field: &dyn ScoreField) -> Result<Vec2> {
    let (a, b) = plan.schedule.ab(j);
    if b == 0.0 {
        return tweedie(x, [0.0, 0.0], a, 0.0);
    }
    tweedie(x, field.score(x, j), a, b)
}

fn nfe_of_tweedie(plan: &RolloutPlan, j: usize) -> u64 {
    u64::from(plan.schedule.ab(j).1 != 0.0)
}

/// Builds a tree from `x_start` at node `start_index` down to `plan.lookahead`.
pub fn rollout(
    x_start: Vec2,
    start_index: usize,
    plan: &RolloutPlan,
    field: &dyn ScoreField,
    rng_seed: u64,
) -> Result<BranchTree> {
    rollout_inner(x_start, start_index, plan, field, rng::mix64(rng_seed), None)
}

fn rollout_inner(
    x_start: Vec2,
    start_index: usize,
    plan: &RolloutPlan,
    field: &dyn ScoreField,
    root_key: u64,
    forced_first: Option<&[Vec2]>,
) -> Result<BranchTree> {
    plan.validate()?;
    let j = plan.lookahead;
    if start_index > plan.n_steps() || start_index < j {
        return Err(Error::Contract(format!(
            "start index {start_index} must lie in [{j}, {}]",
            plan.n_steps()
        )));
    }
    let mut nodes = vec![Node {
        x: x_start,
        step: start_index,
        parent: None,
        eps: None,
        branch: None,
        key: root_key,
    }];
    let mut frontier = vec![0usize];
    let mut nfe = 0u64;
    for k in ((j + 1)..=start_index).rev() {
        let coeffs = plan.coeffs(k);
        let width = plan.branch_widths[k];
        let mut next = Vec::with_capacity(frontier.len() * width);
        for &pid in &frontier {
            let parent = nodes[pid];
            let s = field.score(parent.x, k);
            nfe += 1;
            for c in 0..width {
                let key = rng::child_key(parent.key, c as u64);
                let eps = if coeffs.sigma > 0.0 {
                    match (forced_first, k == start_index) {
                        (Some(forced), true) => Some(forced[c]),
                        _ => Some(rng::normal2_at(key)),
                    }
                } else {
                    None
                };
                let x = reverse_step(parent.x, coeffs, s, eps)?;
                let branch = parent.branch.or(Some(c));
                next.push(nodes.len());
                nodes.push(Node {
                    x,
                    step: k - 1,
                    parent: Some(pid),
                    eps,
                    branch,
                    key,
                });
            }
        }
        frontier = next;
    }
    let mut leaves = Vec::with_capacity(frontier.len());
    for id in frontier {
        let x_j = nodes[id].x;
        let x0_hat = tweedie_at(x_j, j, plan, field)?;
        nfe += nfe_of_tweedie(plan, j);
        leaves.push(Leaf {
            node: id,
            x_j,
            x0_hat,
            reward: None,
        });
    }
    Ok(BranchTree {
        nodes,
        leaves,
        root_step: start_index,
        lookahead: j,
        nfe,
    })
}

/// States of the deterministic path from `x_n` at node `N` down to node 0,
/// indexed by node: `path[k]` is the state at `t_k`.
pub fn ode_path(x_n: Vec2, plan: &RolloutPlan, field: &dyn ScoreField) -> Result<Vec<Vec2>> {
    let n = plan.n_steps();
    let mut path = vec![[0.0, 0.0]; n + 1];
    path[n] = x_n;
    for k in (1..=n).rev() {
        let s = field.score(path[k], k);
        path[k - 1] = reverse_step(path[k], &plan.schedule.step(k).ode, s, None)?;
    }
    Ok(path)
}

/// Revisits `ode_path[i]`, spawns `K` stochastic children with the step-`i`
/// SDE kernel, and continues each deterministically down to `plan.lookahead`.
/// `forced_eps`, if given, replaces the sampled noises of the children.
pub fn revisit_branch(
    ode_path: &[Vec2],
    i: usize,
    k: usize,
    plan: &RolloutPlan,
    field: &dyn ScoreField,
    rng_seed: u64,
    forced_eps: Option<&[Vec2]>,
) -> Result<BranchTree> {
    let n = plan.n_steps();
    if i == 0 || i > n || i >= ode_path.len() {
        return Err(Error::Domain {
            what: "revisit step",
            value: i as f64,
            domain: "1..=N",
        });
    }
    if let Some(f) = forced_eps {
        if f.len() != k {
            return Err(Error::Contract(format!("{} forced noises for K = {k}", f.len())));
        }
    }
    let mut local = plan.clone();
    local.stochastic_mask = vec![false; n + 1];
    local.stochastic_mask[i] = true;
    local.branch_widths = vec![1; n + 1];
    local.branch_widths[i] = k;
    let key = rng::key_from_path(rng_seed, &[i as u64]);
    rollout_inner(ode_path[i], i, &local, field, key, forced_eps)
}

/// Re-simulates a frozen-noise chain from `x` at node `from` down to node
/// `to`, using `eps[m]` for the `m`-th step taken. Returns the end state.
pub fn resimulate(
    mut x: Vec2,
    from: usize,
    to: usize,
    eps: &[Option<Vec2>],
    plan: &RolloutPlan,
    field: &dyn ScoreField,
) -> Result<Vec2> {
    for (m, k) in ((to + 1)..=from).rev().enumerate() {
        let s = field.score(x, k);
        x = reverse_step(x, plan.coeffs(k), s, eps[m])?;
    }
    Ok(x)
}
