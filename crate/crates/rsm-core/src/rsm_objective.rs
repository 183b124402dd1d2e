//! The unified regression loss
//! `C1 (‖s^θ − (s^ref + Ψ)‖² + C2 ‖s^θ − s^{θ†}‖²)`, its canonical gradient,
//! clipping rules, and the registry of fine-tuning methods expressed as
//! per-step `(γ, C1, C2)` tables.

use serde::{Deserialize, Serialize};

use crate::flow_schedules::{affine_ddim_kernel, euler_rf_kernel, KernelCoeffs, SamplerKind, Schedule};
use crate::vec2::{self, Vec2};
use crate::{Error, Result};

/// Named methods of the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodName {
    VggFlow,
    Sqdf,
    ResidualNablaDb,
    ReinforceKl,
    PpoGrpo,
    PcpoBase,
    PcpoReweightDiffusion,
    PcpoReweightFlow,
    BranchGrpo,
    TempFlowGrpo,
    GrpoGuard,
    Custom,
}

impl MethodName {
    pub const NAMED: [MethodName; 11] = [
        MethodName::VggFlow,
        MethodName::Sqdf,
        MethodName::ResidualNablaDb,
        MethodName::ReinforceKl,
        MethodName::PpoGrpo,
        MethodName::PcpoBase,
        MethodName::PcpoReweightDiffusion,
        MethodName::PcpoReweightFlow,
        MethodName::BranchGrpo,
        MethodName::TempFlowGrpo,
        MethodName::GrpoGuard,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MethodName::VggFlow => "VGGFlow",
            MethodName::Sqdf => "SQDF",
            MethodName::ResidualNablaDb => "ResidualNablaDB",
            MethodName::ReinforceKl => "REINFORCE_KL",
            MethodName::PpoGrpo => "PPO_GRPO",
            MethodName::PcpoBase => "PCPO_Base",
            MethodName::PcpoReweightDiffusion => "PCPO_ReweightDiffusion",
            MethodName::PcpoReweightFlow => "PCPO_ReweightFlow",
            MethodName::BranchGrpo => "BranchGRPO",
            MethodName::TempFlowGrpo => "TempFlowGRPO",
            MethodName::GrpoGuard => "GRPOGuard",
            MethodName::Custom => "Custom",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::NAMED
            .iter()
            .chain(std::iter::once(&MethodName::Custom))
            .copied()
            .find(|m| m.label() == s)
    }
}

/// Where the estimator reads the reward: `j = 0`, `j = i − 1`, or `j = i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lookahead {
    Full,
    OneStep,
    Current,
}

impl Lookahead {
    pub fn depth(self, i: usize) -> usize {
        match self {
            Lookahead::Full => 0,
            Lookahead::OneStep => i - 1,
            Lookahead::Current => i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorFamily {
    FirstOrder,
    ZerothOrder,
}

/// Trust-region clipping rule with threshold ξ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "xi")]
pub enum ClipRule {
    None,
    PpoHinge(f64),
    FairClip(f64),
    GuardCentered(f64),
}

impl ClipRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ClipRule::None => Ok(()),
            ClipRule::PpoHinge(xi) | ClipRule::FairClip(xi) | ClipRule::GuardCentered(xi) => {
                if xi > 0.0 && xi.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("clip threshold must be positive, got {xi}")))
                }
            }
        }
    }
}

/// Outcome of a clipping rule for one transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipDecision {
    Active,
    /// The guidance and old-policy anchor are switched off (`Ψ ← 0`, `C2 ← 0`).
    Suppressed,
}

/// Hinge regime table: active iff `1−ξ ≤ ρ ≤ 1+ξ`, or `ρ < 1−ξ` with
/// `r ≥ 0`, or `ρ > 1+ξ` with `r ≤ 0`.
pub fn hinge_regime(rho: f64, xi: f64, reward: f64) -> ClipDecision {
    let inside = (1.0 - xi..=1.0 + xi).contains(&rho);
    let low_ok = rho < 1.0 - xi && reward >= 0.0;
    let high_ok = rho > 1.0 + xi && reward <= 0.0;
    if inside || low_ok || high_ok {
        ClipDecision::Active
    } else {
        ClipDecision::Suppressed
    }
}

/// Gaussian log importance ratio of `x = μ_old + σε` under `μ_θ` vs `μ_old`:
/// `Δμᵀε/σ − ‖Δμ‖²/(2σ²)`.
pub fn gaussian_log_ratio(mu_theta: Vec2, mu_old: Vec2, sigma: f64, eps: Vec2) -> f64 {
    let d = vec2::sub(mu_theta, mu_old);
    vec2::dot(d, eps) / sigma - vec2::norm_sq(d) / (2.0 * sigma * sigma)
}

/// Decides whether a transition keeps its guidance.
///
/// `sigma_tilde` and `dt` give the step noise `σ = σ̃ sqrt(Δt)`; `eps` is the
/// noise that produced the sample (`None` evaluates the ratio at the mean).
/// The hinge rule thresholds `ρ` itself. The fair rule thresholds
/// `exp(σ² log ρ)`, which moves the `1/(σ̃²Δt)` scale outside the clip. The
/// centered rule thresholds `exp(σ (log ρ − E[log ρ]))` with the supplied
/// batch mean (zero when absent).
#[allow(clippy::too_many_arguments)]
pub fn apply_clip(
    rule: ClipRule,
    mu_theta: Vec2,
    mu_old: Vec2,
    sigma_tilde: f64,
    dt: f64,
    reward: f64,
    eps: Option<Vec2>,
    log_rho_mean: Option<f64>,
) -> Result<ClipDecision> {
    rule.validate()?;
    if rule == ClipRule::None {
        return Ok(ClipDecision::Active);
    }
    let sigma = sigma_tilde * dt.sqrt();
    if !(sigma > 0.0) {
        return Err(Error::UndefinedWeight);
    }
    let log_rho = gaussian_log_ratio(mu_theta, mu_old, sigma, eps.unwrap_or([0.0, 0.0]));
    Ok(match rule {
        ClipRule::None => ClipDecision::Active,
        ClipRule::PpoHinge(xi) => hinge_regime(log_rho.exp(), xi, reward),
        ClipRule::FairClip(xi) => hinge_regime((sigma * sigma * log_rho).exp(), xi, reward),
        ClipRule::GuardCentered(xi) => {
            let centred = sigma * (log_rho - log_rho_mean.unwrap_or(0.0));
            hinge_regime(centred.exp(), xi, reward)
        }
    })
}

/// One method as per-step tables (index `i ∈ 0..=N`, entry 0 unused).
///
/// `C1 = c1_base·α^{c1_alpha}` and
/// `C2 = c2_base · r^{c2_reward} / α^{c2_inv_alpha}`; keeping the α powers
/// separate lets `C1·Ψ` and `C1·C2` be formed without dividing by α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: MethodName,
    pub lookahead: Lookahead,
    pub estimator: EstimatorFamily,
    pub branching: bool,
    pub gamma: Vec<f64>,
    pub c1_base: Vec<f64>,
    pub c1_alpha: bool,
    pub c2_base: Vec<f64>,
    pub c2_reward: bool,
    pub c2_inv_alpha: bool,
    /// Steps on which the tables are defined.
    pub defined: Vec<bool>,
    pub clip: ClipRule,
    pub alpha: f64,
    pub sqdf_gamma_base: f64,
    pub resdb_wr_over_wf: f64,
    pub d: usize,
    /// Kernels substituted into `h` (modified-noise reweighting).
    pub kernel_override: Option<Vec<KernelCoeffs>>,
    /// Reweighted sampler weights `w′` when the method defines them.
    pub w_prime: Option<Vec<f64>>,
}

/// Options for [`named_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistryOptions {
    pub alpha: f64,
    pub sqdf_gamma_base: f64,
    pub resdb_wr_over_wf: f64,
    pub d: usize,
    /// Clip rule; `None` selects the method's default.
    pub clip: Option<ClipRule>,
    /// Modified step noises σ′ (index `0..=N`); computed when absent.
    pub sigma_prime: Option<Vec<f64>>,
}

impl Default for RegistryOptions {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            sqdf_gamma_base: 0.9,
            resdb_wr_over_wf: 1.0,
            d: 2,
            clip: None,
            sigma_prime: None,
        }
    }
}

/// Default clip threshold of the ratio-based methods.
pub const DEFAULT_XI: f64 = 1e-4;

impl MethodConfig {
    pub fn n_steps(&self) -> usize {
        self.gamma.len() - 1
    }

    pub fn c1(&self, i: usize) -> f64 {
        self.c1_base[i] * if self.c1_alpha { self.alpha } else { 1.0 }
    }

    pub fn c2(&self, i: usize, reward: f64) -> f64 {
        let mut v = self.c2_base[i];
        if self.c2_reward {
            v *= reward;
        }
        if self.c2_inv_alpha {
            v /= self.alpha;
        }
        v
    }

    /// `C1·C2` without dividing by α when both carry it.
    pub fn c1_c2(&self, i: usize, reward: f64) -> f64 {
        if self.c1_alpha && self.c2_inv_alpha {
            let r = if self.c2_reward { reward } else { 1.0 };
            self.c1_base[i] * self.c2_base[i] * r
        } else {
            self.c1(i) * self.c2(i, reward)
        }
    }

    /// `C1·γ·Ψ̂` from the α-free estimator output `α·Ψ̂`.
    pub fn c1_guidance(&self, i: usize, alpha_psi: Vec2) -> Vec2 {
        if self.c1_alpha {
            vec2::scale(alpha_psi, self.c1_base[i] * self.gamma[i])
        } else {
            vec2::scale(alpha_psi, self.c1(i) * self.gamma[i] / self.alpha)
        }
    }

    pub fn lookahead_depth(&self, i: usize) -> usize {
        self.lookahead.depth(i)
    }

    pub fn validate(&self) -> Result<()> {
        let n1 = self.gamma.len();
        if [self.c1_base.len(), self.c2_base.len(), self.defined.len()]
            .iter()
            .any(|&l| l != n1)
        {
            return Err(Error::Config("method tables have inconsistent lengths".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.clip.validate()?;
        for i in 1..n1 {
            if !self.defined[i] {
                continue;
            }
            if !(self.c1(i) > 0.0) || !self.c1(i).is_finite() {
                return Err(Error::Config(format!("C1 must be positive at step {i}")));
            }
            if !(self.gamma[i] >= 0.0) || !self.gamma[i].is_finite() {
                return Err(Error::Config(format!("gamma must be nonnegative at step {i}")));
            }
        }
        Ok(())
    }

    /// A user-defined method from explicit tables; steps with `C1 = 0` are
    /// left undefined.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        lookahead: Lookahead,
        estimator: EstimatorFamily,
        branching: bool,
        gamma: Vec<f64>,
        c1: Vec<f64>,
        c2: Vec<f64>,
        c2_reward: bool,
        clip: ClipRule,
        alpha: f64,
    ) -> Result<Self> {
        let defined = c1.iter().enumerate().map(|(i, c)| i > 0 && *c > 0.0).collect();
        let cfg = Self {
            name: MethodName::Custom,
            lookahead,
            estimator,
            branching,
            gamma,
            c1_base: c1,
            c1_alpha: false,
            c2_base: c2,
            c2_reward,
            c2_inv_alpha: false,
            defined,
            clip,
            alpha,
            sqdf_gamma_base: 0.0,
            resdb_wr_over_wf: 0.0,
            d: 2,
            kernel_override: None,
            w_prime: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Kernel of step `i` of `schedule` with its stochastic σ replaced.
pub fn kernel_with_sigma(schedule: &Schedule, i: usize, sigma: f64) -> Result<KernelCoeffs> {
    let st = schedule.step(i);
    match schedule.sampler {
        SamplerKind::Ddim => {
            let (a_i, b_i) = schedule.ab(i);
            let (a_p, b_p) = schedule.ab(i - 1);
            affine_ddim_kernel(a_i, b_i, a_p, b_p, sigma, st.sde.delta)
        }
        SamplerKind::EulerRf => euler_rf_kernel(st.t, st.dt, sigma / st.dt.sqrt()),
        SamplerKind::DpmSolverPp => Err(Error::Config(
            "the DPM-Solver++ noise is fixed by the solver and cannot be reassigned".into(),
        )),
    }
}

/// σ at which `w(σ)` attains its minimum; `w` decreases on `(0, σ*]`.
fn sigma_at_min_weight(schedule: &Schedule, i: usize) -> Result<f64> {
    match schedule.sampler {
        SamplerKind::Ddim => {
            let (a_i, b_i) = schedule.ab(i);
            let (a_p, b_p) = schedule.ab(i - 1);
            let rho = a_p / a_i;
            let v = b_p * b_p - b_p.powi(4) / (rho * rho * b_i * b_i);
            Ok(v.max(0.0).sqrt())
        }
        SamplerKind::EulerRf => {
            let st = schedule.step(i);
            Ok((2.0 * st.t * st.dt / (1.0 - st.t)).sqrt())
        }
        SamplerKind::DpmSolverPp => Err(Error::Config(
            "the DPM-Solver++ noise is fixed by the solver and cannot be reassigned".into(),
        )),
    }
}

/// σ′ with `w(σ′) = target` on the decreasing branch of `w`, clamped to the
/// branch end when the target lies below the attainable minimum.
pub fn sigma_for_weight(schedule: &Schedule, i: usize, target: f64) -> Result<f64> {
    let hi = sigma_at_min_weight(schedule, i)?;
    if !(hi > 0.0) {
        return Err(Error::Singular(format!("no admissible noise at step {i}")));
    }
    let w_of = |s: f64| -> Result<f64> {
        let k = kernel_with_sigma(schedule, i, s)?;
        Ok(k.omega * k.delta / s)
    };
    if w_of(hi)? >= target {
        return Ok(hi);
    }
    let (mut lo, mut up) = (hi * 1e-12, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + up);
        if w_of(mid)? > target {
            lo = mid;
        } else {
            up = mid;
        }
    }
    Ok(0.5 * (lo + up))
}

/// Instantiates the registry row `name` on `schedule`.
pub fn named_config(name: MethodName, schedule: &Schedule, opts: &RegistryOptions) -> Result<MethodConfig> {
    if name == MethodName::Custom {
        return Err(Error::Config(
            "Custom methods are built with MethodConfig::custom".into(),
        ));
    }
    let n = schedule.n_steps();
    let alpha = opts.alpha;
    let d = opts.d as f64;
    let mut gamma = vec![0.0; n + 1];
    let mut c1_base = vec![0.0; n + 1];
    let mut c2_base = vec![0.0; n + 1];
    let mut defined = vec![false; n + 1];

    use MethodName::*;
    let (lookahead, estimator, branching) = match name {
        VggFlow => (Lookahead::Current, EstimatorFamily::FirstOrder, false),
        Sqdf | ResidualNablaDb => (Lookahead::OneStep, EstimatorFamily::FirstOrder, false),
        BranchGrpo | TempFlowGrpo => (Lookahead::Full, EstimatorFamily::ZerothOrder, true),
        _ => (Lookahead::Full, EstimatorFamily::ZerothOrder, false),
    };
    let (c1_alpha, c2_reward, c2_inv_alpha) = match name {
        VggFlow => (false, false, false),
        ResidualNablaDb => (false, false, false),
        Sqdf | ReinforceKl | GrpoGuard => (true, false, false),
        _ => (true, true, true),
    };
    let default_clip = match name {
        PpoGrpo | PcpoBase | PcpoReweightDiffusion | PcpoReweightFlow | BranchGrpo | TempFlowGrpo => {
            ClipRule::PpoHinge(DEFAULT_XI)
        }
        GrpoGuard => ClipRule::GuardCentered(DEFAULT_XI),
        _ => ClipRule::None,
    };

    // Reweighted kernels and weights.
    let mut kernel_override = None;
    let mut w_prime = None;
    let w_of = |i: usize| schedule.step(i).sde.w;
    let defined_w: Vec<(usize, f64)> = (1..=n).filter_map(|i| w_of(i).map(|w| (i, w))).collect();
    if name == PcpoReweightDiffusion {
        let sigma_prime = match &opts.sigma_prime {
            Some(s) => {
                if s.len() != n + 1 {
                    return Err(Error::Config(format!(
                        "sigma_prime must have N + 1 = {} entries",
                        n + 1
                    )));
                }
                s.clone()
            }
            None => {
                let avg = defined_w.iter().map(|(_, w)| w).sum::<f64>() / defined_w.len().max(1) as f64;
                let mut s = vec![0.0; n + 1];
                for &(i, _) in &defined_w {
                    s[i] = sigma_for_weight(schedule, i, avg)?;
                }
                s
            }
        };
        let mut kernels = vec![KernelCoeffs::new(1.0, 0.0, 0.0, 0.0); n + 1];
        let mut wp = vec![0.0; n + 1];
        for &(i, _) in &defined_w {
            let k = kernel_with_sigma(schedule, i, sigma_prime[i])?;
            wp[i] = k.w.unwrap_or(0.0);
            kernels[i] = k;
        }
        kernel_override = Some(kernels);
        w_prime = Some(wp);
    }
    if name == PcpoReweightFlow {
        let total_w: f64 = defined_w.iter().map(|(_, w)| w).sum();
        let total_dt: f64 = defined_w.iter().map(|(i, _)| schedule.step(*i).dt).sum();
        let mut wp = vec![0.0; n + 1];
        for &(i, _) in &defined_w {
            wp[i] = schedule.step(i).dt * total_w / total_dt;
        }
        w_prime = Some(wp);
    }

    for i in 1..=n {
        let st = schedule.step(i);
        let k = match &kernel_override {
            Some(ks) => ks[i],
            None => st.sde,
        };
        let (sigma, omega, delta) = (k.sigma, k.omega, k.delta);
        let t = st.t;
        match name {
            VggFlow => {
                if delta.is_finite() && delta > 0.0 && t < 1.0 {
                    gamma[i] = (1.0 - t).powi(2) * delta;
                    c1_base[i] = 1.0 / (d * delta * delta);
                    defined[i] = true;
                }
            }
            _ if !(sigma > 0.0) || !(omega > 0.0) => {}
            Sqdf => {
                gamma[i] = opts.sqdf_gamma_base.powf(n as f64 * t);
                c1_base[i] = 0.5 * omega * omega / (sigma * sigma);
                defined[i] = true;
            }
            ResidualNablaDb => {
                let (a_p, _) = schedule.ab(i - 1);
                let (a_i, _) = schedule.ab(i);
                gamma[i] = a_p * a_p;
                c1_base[i] = omega * omega / (d * sigma.powi(4));
                c2_base[i] = (1.0 - a_i * a_i) * sigma.powi(4) / (omega * omega) * opts.resdb_wr_over_wf;
                defined[i] = true;
            }
            ReinforceKl | PpoGrpo | PcpoBase | BranchGrpo | PcpoReweightDiffusion => {
                gamma[i] = 1.0;
                c1_base[i] = 0.5 * omega * omega / (sigma * sigma);
                c2_base[i] = if name == ReinforceKl { 0.0 } else { 1.0 };
                defined[i] = true;
            }
            PcpoReweightFlow => {
                let wp = w_prime.as_ref().expect("w′ table")[i];
                gamma[i] = wp / k.w.unwrap_or(f64::NAN);
                c1_base[i] = 0.5 * omega * omega / (sigma * sigma);
                c2_base[i] = gamma[i];
                defined[i] = true;
            }
            TempFlowGrpo => {
                gamma[i] = 2.25 * sigma;
                c1_base[i] = 0.5 * omega * omega / (sigma * sigma);
                c2_base[i] = gamma[i];
                defined[i] = true;
            }
            GrpoGuard => {
                gamma[i] = sigma * omega / st.dt;
                c1_base[i] = 0.5 * omega * omega / (sigma * sigma);
                defined[i] = true;
            }
            Custom => unreachable!(),
        }
    }

    let cfg = MethodConfig {
        name,
        lookahead,
        estimator,
        branching,
        gamma,
        c1_base,
        c1_alpha,
        c2_base,
        c2_reward,
        c2_inv_alpha,
        defined,
        clip: opts.clip.unwrap_or(default_clip),
        alpha,
        sqdf_gamma_base: opts.sqdf_gamma_base,
        resdb_wr_over_wf: opts.resdb_wr_over_wf,
        d: opts.d,
        kernel_override,
        w_prime,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `C1 (‖s^θ − (s^ref + Ψ)‖² + C2 ‖s^θ − s^{θ†}‖²)`.
pub fn master_loss(s_theta: Vec2, s_ref: Vec2, s_old: Vec2, psi: Vec2, c1: f64, c2: f64) -> f64 {
    let guided = vec2::sub(s_theta, vec2::add(s_ref, psi));
    let anchor = vec2::sub(s_theta, s_old);
    c1 * (vec2::norm_sq(guided) + c2 * vec2::norm_sq(anchor))
}

/// `G = C1(−Ψ + (s^θ − s^ref) + C2(s^θ − s^{θ†}))`; the loss gradient is `2G`.
pub fn canonical_gradient(s_theta: Vec2, s_ref: Vec2, s_old: Vec2, psi: Vec2, c1: f64, c2: f64) -> Vec2 {
    let pull = vec2::sub(s_theta, s_ref);
    let anchor = vec2::sub(s_theta, s_old);
    vec2::scale(vec2::axpy(vec2::sub(pull, psi), c2, anchor), c1)
}

/// `Ψ = γ(t_i) Ψ̂`.
pub fn effective_guidance(method: &MethodConfig, psi_hat: Vec2, i: usize) -> Vec2 {
    vec2::scale(psi_hat, method.gamma[i])
}

/// Normalised influence `h(t_i) = δ C1 γ/α` (current state) or
/// `δ C1 γ σ²/(αΩ)` (lookahead). A method's kernel override, when present,
/// replaces `coeffs`.
pub fn influence_h(method: &MethodConfig, coeffs: &KernelCoeffs, i: usize) -> Result<f64> {
    let k = match &method.kernel_override {
        Some(ks) => &ks[i],
        None => coeffs,
    };
    let base = k.delta * method.c1(i) * method.gamma[i] / method.alpha;
    match method.lookahead {
        Lookahead::Current => Ok(base),
        _ => {
            if !(k.sigma > 0.0) {
                return Err(Error::UndefinedWeight);
            }
            Ok(base * k.sigma * k.sigma / k.omega)
        }
    }
}

/// REINFORCE surrogate with a KL penalty on the transition means:
/// `−r log p_θ(x_{i−1}|x_i) + α/(2σ²) ‖μ^θ − μ^ref‖²`, where
/// `x_{i−1} = κx + Ω s^{θ†} + σε`.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_kl_surrogate(
    s_theta: Vec2,
    s_ref: Vec2,
    s_old: Vec2,
    x: Vec2,
    coeffs: &KernelCoeffs,
    eps: Vec2,
    reward: f64,
    alpha: f64,
) -> f64 {
    let mean = |s: Vec2| vec2::axpy(vec2::scale(x, coeffs.kappa), coeffs.omega, s);
    let sigma = coeffs.sigma;
    let sample = vec2::axpy(mean(s_old), sigma, eps);
    let mu_theta = mean(s_theta);
    let log_p = -vec2::norm_sq(vec2::sub(sample, mu_theta)) / (2.0 * sigma * sigma)
        - (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let kl = alpha / (2.0 * sigma * sigma) * vec2::norm_sq(vec2::sub(mu_theta, mean(s_ref)));
    -reward * log_p + kl
}

/// Clipped log-ratio surrogate `r·(−log ρ) + αΩ²/(2σ²)‖s^θ − s^ref‖²`; the
/// reward term is dropped when `decision` is `Suppressed`.
#[allow(clippy::too_many_arguments)]
pub fn clipped_log_ratio_surrogate(
    s_theta: Vec2,
    s_ref: Vec2,
    s_old: Vec2,
    coeffs: &KernelCoeffs,
    eps: Vec2,
    reward: f64,
    alpha: f64,
    decision: ClipDecision,
) -> f64 {
    let (omega, sigma) = (coeffs.omega, coeffs.sigma);
    let d = vec2::sub(s_theta, s_old);
    let neg_log_rho = -(omega / sigma) * vec2::dot(d, eps) + omega * omega / (2.0 * sigma * sigma) * vec2::norm_sq(d);
    let anchor = alpha * omega * omega / (2.0 * sigma * sigma) * vec2::norm_sq(vec2::sub(s_theta, s_ref));
    match decision {
        ClipDecision::Active => reward * neg_log_rho + anchor,
        ClipDecision::Suppressed => anchor,
    }
}

/// One row of a method's schedule dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub step: usize,
    pub t: f64,
    pub gamma: f64,
    pub c1: f64,
    /// `C2` evaluated at reward 1.
    pub c2: f64,
    pub h: f64,
    pub w: f64,
    pub omega: f64,
    pub sigma: f64,
    pub delta: f64,
}

/// Rows for every defined step of `method` on `schedule`.
pub fn method_schedule(method: &MethodConfig, schedule: &Schedule) -> Result<Vec<ScheduleRow>> {
    let mut rows = Vec::new();
    for i in 1..=schedule.n_steps() {
        if !method.defined[i] {
            continue;
        }
        let st = schedule.step(i);
        let k = match &method.kernel_override {
            Some(ks) => ks[i],
            None => st.sde,
        };
        rows.push(ScheduleRow {
            step: i,
            t: st.t,
            gamma: method.gamma[i],
            c1: method.c1(i),
            c2: method.c2(i, 1.0),
            h: influence_h(method, &st.sde, i)?,
            w: k.w.unwrap_or(f64::NAN),
            omega: k.omega,
            sigma: k.sigma,
            delta: k.delta,
        });
    }
    Ok(rows)
}
