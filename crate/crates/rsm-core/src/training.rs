//! A fixed ε-prediction MLP with explicit backward rules, denoising score
//! matching, and on-policy reward fine-tuning under any registry method.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{reward_stats, StatsMode, FD_STEP};
use crate::flow_schedules::{ab_coeffs, FlowSpec, TimeGrid};
use crate::mixture_oracle::{tweedie, GaussianMixture, LinearReward, TiltedPair};
use crate::rng;
use crate::rsm_objective::{
    apply_clip, canonical_gradient, gaussian_log_ratio, ClipDecision, ClipRule, EstimatorFamily, Lookahead,
    MethodConfig,
};
use crate::sampler::{reverse_step, RolloutPlan, ScoreField};
use crate::vec2::{self, Mat2, Vec2};
use crate::{Error, Result};

pub const INPUT: usize = 2;
pub const TIME_FEATURES: usize = 8;
pub const IN: usize = INPUT + TIME_FEATURES;
pub const HIDDEN: usize = 64;
pub const OUTPUT: usize = 2;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * IN;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + OUTPUT * HIDDEN;
pub const N_PARAMS: usize = B3 + OUTPUT;

/// Angular frequencies of the sin/cos time features.
pub const TIME_FREQS: [f64; 4] = [1.0, 4.0, 16.0, 64.0];

/// `[sin ω_k t, cos ω_k t]` for each frequency.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    for (k, w) in TIME_FREQS.iter().enumerate() {
        let (s, c) = (w * t).sin_cos();
        f[2 * k] = s;
        f[2 * k + 1] = c;
    }
    f
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], k: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

/// Activations kept for the backward pass.
#[derive(Clone)]
pub struct Cache {
    input: [f64; IN],
    h1: [f64; HIDDEN],
    a1: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    a2: [f64; HIDDEN],
}

impl Default for Cache {
    fn default() -> Self {
        Self {
            input: [0.0; IN],
            h1: [0.0; HIDDEN],
            a1: [0.0; HIDDEN],
            h2: [0.0; HIDDEN],
            a2: [0.0; HIDDEN],
        }
    }
}

/// `(x, features(t)) → 64 → 64 → ε̂`, SiLU activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet {
    pub params: Vec<f64>,
}

/// Header stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kind: String,
    pub input_dim: usize,
    pub time_features: usize,
    pub time_freqs: Vec<f64>,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub output: String,
    pub n_params: usize,
}

impl Architecture {
    pub fn current() -> Self {
        Self {
            kind: "mlp".into(),
            input_dim: INPUT,
            time_features: TIME_FEATURES,
            time_freqs: TIME_FREQS.to_vec(),
            hidden: vec![HIDDEN, HIDDEN],
            activation: "silu".into(),
            output: "epsilon".into(),
            n_params: N_PARAMS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub params: Vec<f64>,
}

impl ScoreNet {
    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut r = rng::stream(rng::key_from_path(seed, &[0x6e6574]));
        let mut params = vec![0.0; N_PARAMS];
        let mut fill = |start: usize, len: usize, fan_in: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let s = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[start..start + len] {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, r);
                *p = s * z;
            }
        };
        fill(W1, HIDDEN * IN, IN, &mut r);
        fill(W2, HIDDEN * HIDDEN, HIDDEN, &mut r);
        fill(W3, OUTPUT * HIDDEN, HIDDEN, &mut r);
        Self { params }
    }

    /// A network whose output is identically zero.
    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; N_PARAMS],
        }
    }

    pub fn forward(&self, x: Vec2, t: f64) -> Vec2 {
        let mut c = Cache::default();
        self.forward_cached(x, t, &mut c)
    }

    pub fn forward_cached(&self, x: Vec2, t: f64, c: &mut Cache) -> Vec2 {
        let p = &self.params;
        c.input[0] = x[0];
        c.input[1] = x[1];
        c.input[INPUT..].copy_from_slice(&time_features(t));
        for r in 0..HIDDEN {
            let h = p[B1 + r] + dot(&p[W1 + r * IN..W1 + (r + 1) * IN], &c.input);
            c.h1[r] = h;
            c.a1[r] = h * sigmoid(h);
        }
        for r in 0..HIDDEN {
            let h = p[B2 + r] + dot(&p[W2 + r * HIDDEN..W2 + (r + 1) * HIDDEN], &c.a1);
            c.h2[r] = h;
            c.a2[r] = h * sigmoid(h);
        }
        let mut out = [0.0; OUTPUT];
        for (o, v) in out.iter_mut().enumerate() {
            *v = p[B3 + o] + dot(&p[W3 + o * HIDDEN..W3 + (o + 1) * HIDDEN], &c.a2);
        }
        out
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂ε̂ = g_out` at a cached point.
    pub fn backward(&self, c: &Cache, g_out: Vec2, grad: &mut [f64]) {
        let p = &self.params;
        let mut g_a2 = [0.0; HIDDEN];
        for o in 0..OUTPUT {
            grad[B3 + o] += g_out[o];
            axpy(&mut grad[W3 + o * HIDDEN..W3 + (o + 1) * HIDDEN], g_out[o], &c.a2);
            axpy(&mut g_a2, g_out[o], &p[W3 + o * HIDDEN..W3 + (o + 1) * HIDDEN]);
        }
        let mut g_a1 = [0.0; HIDDEN];
        for r in 0..HIDDEN {
            let s = sigmoid(c.h2[r]);
            let g = g_a2[r] * s * (1.0 + c.h2[r] * (1.0 - s));
            if g == 0.0 {
                continue;
            }
            grad[B2 + r] += g;
            axpy(&mut grad[W2 + r * HIDDEN..W2 + (r + 1) * HIDDEN], g, &c.a1);
            axpy(&mut g_a1, g, &p[W2 + r * HIDDEN..W2 + (r + 1) * HIDDEN]);
        }
        for r in 0..HIDDEN {
            let s = sigmoid(c.h1[r]);
            let g = g_a1[r] * s * (1.0 + c.h1[r] * (1.0 - s));
            grad[B1 + r] += g;
            axpy(&mut grad[W1 + r * IN..W1 + (r + 1) * IN], g, &c.input);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            architecture: Architecture::current(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.architecture != Architecture::current() || ck.params.len() != N_PARAMS {
            return Err(Error::Config("checkpoint architecture does not match".into()));
        }
        Ok(Self {
            params: ck.params.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
        Self::from_checkpoint(&ck)
    }
}

/// Score field `s = −ε̂(x, t_i)/b_i` of a network on a grid.
pub struct NetField<'a> {
    pub net: &'a ScoreNet,
    times: Vec<f64>,
    ab: Vec<(f64, f64)>,
}

impl<'a> NetField<'a> {
    pub fn new(net: &'a ScoreNet, flow: &FlowSpec, grid: &TimeGrid) -> Result<Self> {
        let ab = grid
            .times()
            .iter()
            .map(|&t| ab_coeffs(flow, t).map(|c| (c.a, c.b)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            net,
            times: grid.times().to_vec(),
            ab,
        })
    }

    pub fn for_plan(net: &'a ScoreNet, plan: &RolloutPlan) -> Result<Self> {
        Self::new(net, &plan.schedule.flow, &plan.schedule.grid)
    }
}

impl ScoreField for NetField<'_> {
    fn score(&self, x: Vec2, i: usize) -> Vec2 {
        let e = self.net.forward(x, self.times[i]);
        vec2::scale(e, -1.0 / self.ab[i].1)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Optimiser settings shared by pretraining and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// When set, the learning rate follows a cosine from `lr` down to this
    /// value over `iters`.
    pub lr_min: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4096,
            iters: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 100,
            seed: 0,
            lr_min: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(N_PARAMS, self.lr, self.beta1, self.beta2, self.adam_eps)
    }

    /// Learning rate used at iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        match self.lr_min {
            None => self.lr,
            Some(lo) => {
                let frac = it as f64 / self.iters.max(1) as f64;
                lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Work items per parallel chunk; fixed so that results do not depend on
/// the number of threads.
const CHUNK: usize = 128;

fn sum_chunks(parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; N_PARAMS];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Output of [`pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub net: ScoreNet,
    pub losses: Vec<f64>,
}

/// Denoising score matching on `reference`: minimises
/// `E‖ε̂(a_t x_0 + b_t ε, t) − ε‖²` with `t` uniform over the grid's nonzero
/// nodes. Fails if the loss becomes non-finite or, when `max_final_loss` is
/// given, the mean loss of the last 10% of iterations exceeds it.
pub fn pretrain(
    net: ScoreNet,
    reference: &GaussianMixture,
    flow: &FlowSpec,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    max_final_loss: Option<f64>,
) -> Result<PretrainResult> {
    cfg.validate()?;
    let n = grid.n_steps();
    let ab: Vec<(f64, f64)> = grid
        .times()
        .iter()
        .map(|&t| ab_coeffs(flow, t).map(|c| (c.a, c.b)))
        .collect::<Result<_>>()?;
    let mut net = net;
    let mut opt = cfg.adam();
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let n_chunks = cfg.batch.div_ceil(CHUNK);
        let parts: Vec<(f64, Vec<f64>)> = (0..n_chunks)
            .into_par_iter()
            .map(|ch| {
                let mut grad = vec![0.0; N_PARAMS];
                let mut loss = 0.0;
                let mut cache = Cache::default();
                let lo = ch * CHUNK;
                let hi = (lo + CHUNK).min(cfg.batch);
                let scale = 1.0 / cfg.batch as f64;
                for b in lo..hi {
                    let mut r = rng::stream(rng::key_from_path(cfg.seed, &[it as u64, b as u64]));
                    let x0 = reference.sample(&mut r);
                    let k = r.gen_range(1..=n);
                    let e = rng::normal2(&mut r);
                    let (a, bt) = ab[k];
                    let xt = vec2::axpy(vec2::scale(x0, a), bt, e);
                    let out = net.forward_cached(xt, grid.t(k), &mut cache);
                    let d = vec2::sub(out, e);
                    loss += vec2::norm_sq(d) * scale;
                    net.backward(&cache, vec2::scale(d, 2.0 * scale), &mut grad);
                }
                (loss, grad)
            })
            .collect();
        let (loss, grad) = sum_chunks(parts);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("DSM loss {loss} at iteration {it}")));
        }
        losses.push(loss);
        opt.lr = cfg.lr_at(it);
        opt.step(&mut net.params, &grad);
    }
    if let Some(limit) = max_final_loss {
        let tail = (losses.len() / 10).max(1).min(losses.len());
        if tail > 0 {
            let avg = vec2::mean(&losses[losses.len() - tail..]);
            if avg > limit {
                return Err(Error::Diverged(format!(
                    "final DSM loss {avg} above the threshold {limit}"
                )));
            }
        }
    }
    Ok(PretrainResult { net, losses })
}

/// Options of the fine-tuning loop beyond the optimiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneOptions {
    /// Trajectories sharing one initial noise when the method branches.
    pub group_size: usize,
    pub stats_mode: StatsMode,
    /// Gradient steps per collected batch; 1 is strictly on-policy.
    pub updates_per_batch: usize,
    /// Window of the moving average reported as the smoothed reward.
    pub smoothing_window: usize,
    /// Trajectories used by each periodic evaluation.
    pub eval_samples: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            group_size: 6,
            stats_mode: StatsMode::Centered,
            updates_per_batch: 1,
            smoothing_window: 20,
            eval_samples: 0,
        }
    }
}

/// One line of the fine-tuning log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub reward_mean: f64,
    pub reward_se: f64,
    pub kl_proxy: f64,
    pub drift: f64,
    pub clip_fraction: f64,
}

/// Output of [`rsm_finetune`].
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub net: ScoreNet,
    pub metrics: Vec<MetricsRow>,
    /// Set when a non-finite loss stopped the run; `net` is then the last
    /// finite parameter vector.
    pub aborted: Option<String>,
}

impl FinetuneResult {
    /// Trailing moving average of `reward_mean`.
    pub fn smoothed_rewards(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.metrics.len())
            .map(|k| {
                let lo = (k + 1).saturating_sub(w);
                vec2::mean(&self.metrics[lo..=k].iter().map(|m| m.reward_mean).collect::<Vec<_>>())
            })
            .collect()
    }
}

/// One collected trajectory.
struct Trajectory {
    /// `states[k]` is the state at node `k`.
    states: Vec<Vec2>,
    /// Noise injected at step `k` (index `k`), if stochastic.
    eps: Vec<Option<Vec2>>,
    /// Behaviour-policy score at node `k`.
    s_old: Vec<Vec2>,
    reward: f64,
}

fn collect(
    field: &NetField<'_>,
    plan: &RolloutPlan,
    reward: &LinearReward,
    batch: usize,
    group: usize,
    key: u64,
) -> Result<Vec<Trajectory>> {
    let n = plan.n_steps();
    (0..batch)
        .into_par_iter()
        .with_min_len(CHUNK / 4)
        .map(|b| {
            let g = b / group;
            let mut states = vec![[0.0; 2]; n + 1];
            let mut eps = vec![None; n + 1];
            let mut s_old = vec![[0.0; 2]; n + 1];
            states[n] = rng::normal2_at(rng::key_from_path(key, &[0, g as u64]));
            for k in (1..=n).rev() {
                let c = plan.coeffs(k);
                let s = field.score(states[k], k);
                s_old[k] = s;
                let e = (c.sigma > 0.0).then(|| rng::normal2_at(rng::key_from_path(key, &[1, b as u64, k as u64])));
                eps[k] = e;
                states[k - 1] = reverse_step(states[k], c, s, e)?;
            }
            Ok(Trajectory {
                reward: reward.eval(states[0]),
                states,
                eps,
                s_old,
            })
        })
        .collect()
}

/// Jacobian of the posterior-mean map of `field` at node `i`, by central
/// differences.
fn fd_tweedie_jacobian(field: &NetField<'_>, x: Vec2, i: usize) -> Result<Mat2> {
    let (a, b) = field.ab[i];
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

/// On-policy fine-tuning of `net` (initialised from `net_ref`) with the
/// unified loss of `method`.
///
/// Each epoch samples `cfg.batch` trajectories under the current network,
/// forms the per-step guidance (zeroth order from the recorded noises and
/// terminal rewards, or first order from Tweedie Jacobians of the current
/// network at the current or next state), gates it with the method's clip
/// rule, and takes `updates_per_batch` Adam steps on
/// `mean_b Σ_i C1(‖s^θ − s^ref − Ψ‖² + C2‖s^θ − s^{θ†}‖²)`.
pub fn rsm_finetune(
    net_ref: &ScoreNet,
    net: ScoreNet,
    pair: &TiltedPair,
    method: &MethodConfig,
    plan: &RolloutPlan,
    cfg: &TrainConfig,
    opts: &FinetuneOptions,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    method.validate()?;
    plan.validate()?;
    if method.n_steps() != plan.n_steps() {
        return Err(Error::Config("method tables and plan disagree on N".into()));
    }
    if method.estimator == EstimatorFamily::ZerothOrder && method.lookahead != Lookahead::Full {
        return Err(Error::Config(
            "the fine-tuning loop reads zeroth-order rewards at the terminal state only".into(),
        ));
    }
    if method.estimator == EstimatorFamily::FirstOrder && method.lookahead == Lookahead::Full {
        return Err(Error::Config(
            "first-order fine-tuning supports current-state and one-step lookahead".into(),
        ));
    }
    let n = plan.n_steps();
    let group = if method.branching { opts.group_size.max(1) } else { 1 };
    let alpha = method.alpha;
    let ref_field = NetField::for_plan(net_ref, plan)?;
    let times = plan.schedule.grid.times().to_vec();
    let mut net = net;
    let mut last_good = net.clone();
    let mut opt = cfg.adam();
    let mut metrics = Vec::with_capacity(cfg.iters);

    for epoch in 0..cfg.iters {
        let key = rng::key_from_path(cfg.seed, &[0x7274, epoch as u64]);
        let trajs = {
            let field = NetField::for_plan(&net, plan)?;
            collect(&field, plan, &pair.reward, cfg.batch, group, key)?
        };
        let rewards: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
        let stats_all = reward_stats(&rewards, StatsMode::Raw);
        let mut adv = vec![0.0; cfg.batch];
        let group_len = if method.branching { group } else { cfg.batch };
        for (g, chunk) in rewards.chunks(group_len).enumerate() {
            let a = reward_stats(chunk, opts.stats_mode).advantages();
            adv[g * group_len..g * group_len + chunk.len()].copy_from_slice(&a);
        }

        // Reference scores at visited states, fixed for the epoch.
        let s_ref: Vec<Vec<Vec2>> = trajs
            .par_iter()
            .map(|tr| {
                (0..=n)
                    .map(|k| {
                        if k == 0 {
                            [0.0; 2]
                        } else {
                            ref_field.score(tr.states[k], k)
                        }
                    })
                    .collect()
            })
            .collect();

        // α-free guidance α·Ψ̂ per (trajectory, step), fixed for the epoch.
        let guidance: Vec<Vec<Vec2>> = {
            let field = NetField::for_plan(&net, plan)?;
            trajs
                .par_iter()
                .enumerate()
                .map(|(b, tr)| {
                    let mut out = vec![[0.0; 2]; n + 1];
                    for k in 1..=n {
                        if !method.defined[k] {
                            continue;
                        }
                        let c = plan.coeffs(k);
                        out[k] = match (method.estimator, method.lookahead) {
                            (EstimatorFamily::ZerothOrder, _) => match tr.eps[k] {
                                Some(e) => vec2::scale(e, c.sigma / c.omega * adv[b]),
                                None => [0.0; 2],
                            },
                            (EstimatorFamily::FirstOrder, Lookahead::Current) => {
                                let j = fd_tweedie_jacobian(&field, tr.states[k], k)?;
                                vec2::mat_t_vec(j, pair.reward.grad())
                            }
                            (EstimatorFamily::FirstOrder, _) => {
                                if c.sigma <= 0.0 {
                                    [0.0; 2]
                                } else if k == 1 {
                                    vec2::scale(pair.reward.grad(), c.sigma * c.sigma / c.omega)
                                } else {
                                    let j = fd_tweedie_jacobian(&field, tr.states[k - 1], k - 1)?;
                                    vec2::scale(vec2::mat_t_vec(j, pair.reward.grad()), c.sigma * c.sigma / c.omega)
                                }
                            }
                        };
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?
        };

        let mut kl_sum = 0.0;
        let mut drift_sum = 0.0;
        let mut clip_total = 0usize;
        let mut clip_suppressed = 0usize;
        let mut aborted = None;

        for inner in 0..opts.updates_per_batch.max(1) {
            // Current-policy scores and clip decisions.
            let cur: Vec<Vec<Vec2>> = {
                let field = NetField::for_plan(&net, plan)?;
                if inner == 0 {
                    trajs.iter().map(|t| t.s_old.clone()).collect()
                } else {
                    trajs
                        .par_iter()
                        .map(|tr| {
                            (0..=n)
                                .map(|k| if k == 0 { [0.0; 2] } else { field.score(tr.states[k], k) })
                                .collect()
                        })
                        .collect()
                }
            };
            let mut log_rho_mean = vec![0.0; n + 1];
            if matches!(method.clip, ClipRule::GuardCentered(_)) {
                for k in 1..=n {
                    let c = plan.coeffs(k);
                    if c.sigma <= 0.0 {
                        continue;
                    }
                    let vals: Vec<f64> = trajs
                        .iter()
                        .zip(&cur)
                        .map(|(tr, s)| {
                            let mu_t = vec2::scale(s[k], c.omega);
                            let mu_o = vec2::scale(tr.s_old[k], c.omega);
                            gaussian_log_ratio(mu_t, mu_o, c.sigma, tr.eps[k].unwrap_or([0.0; 2]))
                        })
                        .collect();
                    log_rho_mean[k] = vec2::mean(&vals);
                }
            }

            let n_chunks = cfg.batch.div_ceil(CHUNK);
            let inv_b = 1.0 / cfg.batch as f64;
            let parts: Vec<(f64, Vec<f64>, f64, f64, usize, usize)> = (0..n_chunks)
                .into_par_iter()
                .map(|ch| {
                    let mut grad = vec![0.0; N_PARAMS];
                    let mut loss = 0.0;
                    let (mut kl, mut drift) = (0.0, 0.0);
                    let (mut total, mut supp) = (0usize, 0usize);
                    let mut cache = Cache::default();
                    let lo = ch * CHUNK;
                    let hi = (lo + CHUNK).min(cfg.batch);
                    for b in lo..hi {
                        let tr = &trajs[b];
                        for k in 1..=n {
                            let c = plan.coeffs(k);
                            let st = plan.schedule.step(k);
                            let s_t = cur[b][k];
                            let s_r = s_ref[b][k];
                            if c.sigma > 0.0 {
                                let dmu = vec2::scale(vec2::sub(s_t, s_r), c.omega);
                                kl += vec2::norm_sq(dmu) / (2.0 * c.sigma * c.sigma) * inv_b;
                                drift += vec2::norm_sq(dmu) * inv_b;
                            }
                            if !method.defined[k] {
                                continue;
                            }
                            let mut psi = vec2::scale(guidance[b][k], method.gamma[k] / alpha);
                            let mut c2 = method.c2(k, tr.reward);
                            if method.clip != ClipRule::None && c.sigma > 0.0 {
                                let decision = apply_clip(
                                    method.clip,
                                    vec2::scale(s_t, c.omega),
                                    vec2::scale(tr.s_old[k], c.omega),
                                    st.sigma_tilde,
                                    st.dt,
                                    tr.reward,
                                    tr.eps[k],
                                    Some(log_rho_mean[k]),
                                )?;
                                total += 1;
                                if decision == ClipDecision::Suppressed {
                                    supp += 1;
                                    psi = [0.0; 2];
                                    c2 = 0.0;
                                }
                            }
                            let c1 = method.c1(k);
                            loss += inv_b * crate::rsm_objective::master_loss(s_t, s_r, tr.s_old[k], psi, c1, c2);
                            let g = canonical_gradient(s_t, s_r, tr.s_old[k], psi, c1, c2);
                            // s = −ε̂/b, so ∂L/∂ε̂ = −(2G)/b.
                            let b_k = plan.schedule.ab(k).1;
                            let g_eps = vec2::scale(g, -2.0 * inv_b / b_k);
                            net.forward_cached(tr.states[k], times[k], &mut cache);
                            net.backward(&cache, g_eps, &mut grad);
                        }
                    }
                    Ok((loss, grad, kl, drift, total, supp))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut loss = 0.0;
            let mut grad = vec![0.0; N_PARAMS];
            let (mut kl, mut drift) = (0.0, 0.0);
            let (mut total, mut supp) = (0usize, 0usize);
            for (l, g, k, d, t, s) in parts {
                loss += l;
                kl += k;
                drift += d;
                total += t;
                supp += s;
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            if inner == 0 {
                kl_sum = kl;
                drift_sum = drift;
            }
            clip_total += total;
            clip_suppressed += supp;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                aborted = Some(format!("non-finite loss at epoch {epoch}"));
                break;
            }
            last_good = net.clone();
            opt.lr = cfg.lr_at(epoch);
            opt.step(&mut net.params, &grad);
        }

        metrics.push(MetricsRow {
            epoch,
            reward_mean: stats_all.mean,
            reward_se: stats_all.std / (cfg.batch as f64).sqrt(),
            kl_proxy: kl_sum,
            drift: drift_sum,
            clip_fraction: if clip_total == 0 {
                0.0
            } else {
                clip_suppressed as f64 / clip_total as f64
            },
        });
        if let Some(reason) = aborted {
            return Ok(FinetuneResult {
                net: last_good,
                metrics,
                aborted: Some(reason),
            });
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Ok(FinetuneResult {
                net: last_good,
                metrics,
                aborted: Some(format!("non-finite parameters after epoch {epoch}")),
            });
        }
    }
    Ok(FinetuneResult {
        net,
        metrics,
        aborted: None,
    })
}

/// Mean terminal reward and its standard error over `n` full rollouts of
/// `plan` from standard normal starts.
pub fn eval_reward(
    field: &dyn ScoreField,
    plan: &RolloutPlan,
    reward: &LinearReward,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let x0 = sample_terminal(field, plan, n, seed)?;
    let r: Vec<f64> = x0.iter().map(|x| reward.eval(*x)).collect();
    let s = reward_stats(&r, StatsMode::Raw);
    Ok((s.mean, s.std / (n as f64).sqrt()))
}

/// `n` samples of the reverse process of `plan` started from `N(0, I)` at node `N`.
pub fn sample_terminal(field: &dyn ScoreField, plan: &RolloutPlan, n: usize, seed: u64) -> Result<Vec<Vec2>> {
    let steps = plan.n_steps();
    (0..n)
        .into_par_iter()
        .with_min_len(64)
        .map(|m| {
            let mut x = rng::normal2_at(rng::key_from_path(seed, &[0, m as u64]));
            for k in (1..=steps).rev() {
                let c = plan.coeffs(k);
                let s = field.score(x, k);
                let e = (c.sigma > 0.0).then(|| rng::normal2_at(rng::key_from_path(seed, &[1, m as u64, k as u64])));
                x = reverse_step(x, c, s, e)?;
            }
            Ok(x)
        })
        .collect()
}

/// Root-mean-square distance between the terminal samples of two fields
/// driven by identical starts and noises: the cost of an explicit coupling,
/// hence an upper bound on the 2-Wasserstein distance between the two
/// sampling distributions.
pub fn coupled_w2(a: &dyn ScoreField, b: &dyn ScoreField, plan: &RolloutPlan, n: usize, seed: u64) -> Result<f64> {
    let xa = sample_terminal(a, plan, n, seed)?;
    let xb = sample_terminal(b, plan, n, seed)?;
    let d: Vec<f64> = xa
        .iter()
        .zip(&xb)
        .map(|(p, q)| vec2::norm_sq(vec2::sub(*p, *q)))
        .collect();
    Ok(vec2::mean(&d).sqrt())
}

/// A loss together with its gradient at the given parameters.
pub type ValueAndGrad<'a> = &'a dyn Fn(&[f64]) -> (f64, Vec<f64>);

/// Largest relative discrepancy between analytic and central-difference
/// gradients over `n_sampled` randomly chosen coordinates. The relative error
/// uses `max(|g_bp|, |g_fd|, 1e−6)` as denominator; an empty sample gives 0.
pub fn grad_check(params: &[f64], value_and_grad: ValueAndGrad<'_>, n_sampled: usize, seed: u64) -> f64 {
    const H: f64 = 1e-5;
    if n_sampled == 0 || params.is_empty() {
        return 0.0;
    }
    let (_, g) = value_and_grad(params);
    let mut r = rng::stream(rng::mix64(seed));
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for _ in 0..n_sampled {
        let k = r.gen_range(0..params.len());
        let orig = p[k];
        p[k] = orig + H;
        let fp = value_and_grad(&p).0;
        p[k] = orig - H;
        let fm = value_and_grad(&p).0;
        p[k] = orig;
        let fd = (fp - fm) / (2.0 * H);
        let denom = g[k].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((g[k] - fd).abs() / denom);
    }
    worst
}

/// Mean DSM loss and its gradient on a fixed, seeded batch (used by
/// [`grad_check`] and tests).
pub fn dsm_loss_and_grad(
    params: &[f64],
    reference: &GaussianMixture,
    flow: &FlowSpec,
    grid: &TimeGrid,
    batch: usize,
    seed: u64,
) -> (f64, Vec<f64>) {
    let net = ScoreNet {
        params: params.to_vec(),
    };
    let mut grad = vec![0.0; N_PARAMS];
    let mut loss = 0.0;
    let mut cache = Cache::default();
    let scale = 1.0 / batch as f64;
    for b in 0..batch {
        let mut r = rng::stream(rng::key_from_path(seed, &[b as u64]));
        let x0 = reference.sample(&mut r);
        let k = r.gen_range(1..=grid.n_steps());
        let e = rng::normal2(&mut r);
        let ab = ab_coeffs(flow, grid.t(k)).expect("grid inside [0, 1]");
        let xt = vec2::axpy(vec2::scale(x0, ab.a), ab.b, e);
        let out = net.forward_cached(xt, grid.t(k), &mut cache);
        let d = vec2::sub(out, e);
        loss += vec2::norm_sq(d) * scale;
        net.backward(&cache, vec2::scale(d, 2.0 * scale), &mut grad);
    }
    (loss, grad)
}

/// Median angle (degrees) between learned and exact scores over `points`
/// at node `i`.
pub fn median_angular_error(learned: &dyn ScoreField, exact: &dyn ScoreField, points: &[Vec2], i: usize) -> f64 {
    let mut angles: Vec<f64> = points
        .iter()
        .map(|x| {
            let a = learned.score(*x, i);
            let b = exact.score(*x, i);
            let c = vec2::dot(a, b) / (vec2::norm(a) * vec2::norm(b)).max(1e-300);
            c.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    angles[angles.len() / 2]
}
