//! Affine conditional flows `x_t = a_t x_0 + b_t x_1` and the coefficients of
//! their discretised reverse kernels `N(κ x + Ω s, σ² I)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Resolution of the tabulated `∫β` for VP schedules.
pub const VP_TABLE_POINTS: usize = 10_001;

/// Family of affine flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowKind {
    Vp,
    Ve,
    RectifiedFlow,
}

/// Serializable description of a flow; see [`FlowSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FlowParams {
    /// Linear β(t) = β_min + t(β_max − β_min).
    Vp {
        beta_min: f64,
        beta_max: f64,
    },
    /// Geometric σ(t) = σ_min (σ_max/σ_min)^t.
    Ve {
        sigma_min: f64,
        sigma_max: f64,
    },
    RectifiedFlow,
}

/// An affine flow schedule. VP schedules carry a tabulated cumulative β.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "FlowParams", into = "FlowParams")]
pub struct FlowSpec {
    params: FlowParams,
    cum_beta: Option<Arc<[f64]>>,
}

/// `(a_t, b_t)` and their time derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbCoeffs {
    pub a: f64,
    pub b: f64,
    pub a_dot: f64,
    pub b_dot: f64,
}

impl FlowSpec {
    pub fn vp(beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(FlowParams::Vp { beta_min, beta_max })
    }

    pub fn ve(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(FlowParams::Ve { sigma_min, sigma_max })
    }

    pub fn rectified() -> Self {
        Self {
            params: FlowParams::RectifiedFlow,
            cum_beta: None,
        }
    }

    pub fn new(params: FlowParams) -> Result<Self> {
        match params {
            FlowParams::Vp { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "VP schedule needs 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
                    )));
                }
                let n = VP_TABLE_POINTS;
                let h = 1.0 / (n - 1) as f64;
                let beta = |t: f64| beta_min + t * (beta_max - beta_min);
                let mut table = Vec::with_capacity(n);
                table.push(0.0);
                for k in 1..n {
                    let t0 = (k - 1) as f64 * h;
                    let t1 = k as f64 * h;
                    let prev = table[k - 1];
                    table.push(prev + 0.5 * h * (beta(t0) + beta(t1)));
                }
                Ok(Self {
                    params,
                    cum_beta: Some(table.into()),
                })
            }
            FlowParams::Ve { sigma_min, sigma_max } => {
                if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "VE schedule needs 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
                    )));
                }
                Ok(Self { params, cum_beta: None })
            }
            FlowParams::RectifiedFlow => Ok(Self::rectified()),
        }
    }

    pub fn kind(&self) -> FlowKind {
        match self.params {
            FlowParams::Vp { .. } => FlowKind::Vp,
            FlowParams::Ve { .. } => FlowKind::Ve,
            FlowParams::RectifiedFlow => FlowKind::RectifiedFlow,
        }
    }

    pub fn params(&self) -> FlowParams {
        self.params
    }

    /// β(t) for VP schedules, `None` otherwise.
    pub fn beta(&self, t: f64) -> Option<f64> {
        match self.params {
            FlowParams::Vp { beta_min, beta_max } => Some(beta_min + t * (beta_max - beta_min)),
            _ => None,
        }
    }

    /// `∫_0^t β` read from the trapezoid table with linear interpolation.
    fn integrated_beta(&self, t: f64) -> f64 {
        let table = self.cum_beta.as_ref().expect("VP table");
        let pos = t * (table.len() - 1) as f64;
        let k = (pos.floor() as usize).min(table.len() - 2);
        let frac = pos - k as f64;
        table[k] + frac * (table[k + 1] - table[k])
    }

    /// `ᾱ_t = a_t²` for VP; for other families the squared signal coefficient.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        Ok(ab_coeffs(self, t)?.a.powi(2))
    }
}

impl TryFrom<FlowParams> for FlowSpec {
    type Error = Error;
    fn try_from(p: FlowParams) -> Result<Self> {
        Self::new(p)
    }
}

impl From<FlowSpec> for FlowParams {
    fn from(f: FlowSpec) -> Self {
        f.params
    }
}

impl PartialEq for FlowSpec {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

fn check_unit(what: &'static str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            value: t,
            domain: "[0, 1]",
        })
    }
}

/// Signal and noise coefficients of `flow` at time `t`.
pub fn ab_coeffs(flow: &FlowSpec, t: f64) -> Result<AbCoeffs> {
    check_unit("t", t)?;
    Ok(match flow.params {
        FlowParams::Vp { .. } => {
            let integral = flow.integrated_beta(t);
            let alpha_bar = (-integral).exp();
            let one_minus = -(-integral).exp_m1();
            let a = alpha_bar.sqrt();
            let b = one_minus.sqrt();
            let beta = flow.beta(t).unwrap_or(0.0);
            let b_dot = if b > 0.0 {
                0.5 * beta * alpha_bar / b
            } else {
                f64::INFINITY
            };
            AbCoeffs {
                a,
                b,
                a_dot: -0.5 * beta * a,
                b_dot,
            }
        }
        FlowParams::Ve { sigma_min, sigma_max } => {
            let log_ratio = (sigma_max / sigma_min).ln();
            let b = sigma_min * (t * log_ratio).exp();
            AbCoeffs {
                a: 1.0,
                b,
                a_dot: 0.0,
                b_dot: b * log_ratio,
            }
        }
        FlowParams::RectifiedFlow => AbCoeffs {
            a: 1.0 - t,
            b: t,
            a_dot: -1.0,
            b_dot: 1.0,
        },
    })
}

/// Discretisation `0 = t_0 < t_1 < … < t_N ≤ 1`.
///
/// Grids that stop short of 1 serve samplers that are singular at `t = 1`
/// (Euler rectified flow); sampling then starts from `N(0, I)` at `t_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// `N` equal steps.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        let mut times: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
        times[n] = 1.0;
        Ok(Self { times })
    }

    /// `N` steps whose nodes are `s u/(1 + (s − 1)u)` for `u` uniform on
    /// `[0, t_max]`; `s > 1` crowds the nodes toward `t_max`.
    pub fn shifted(n: usize, t_max: f64, shift: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(Error::Config(format!("grid shift must be positive, got {shift}")));
        }
        let mut times: Vec<f64> = (0..=n)
            .map(|k| {
                let u = t_max * k as f64 / n as f64;
                shift * u / (1.0 + (shift - 1.0) * u)
            })
            .collect();
        if t_max == 1.0 {
            times[n] = 1.0;
        }
        Self::from_times(times)
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        let last = times.last().copied().unwrap_or(0.0);
        if times.len() < 2 || times[0] != 0.0 || !(last <= 1.0) {
            return Err(Error::Config(
                "time grid must start at 0, end at most at 1 and have at least one step".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("time grid must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    /// Number of steps `N`.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// `Δt_i = t_i − t_{i−1}` for `i ≥ 1`.
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i] - self.times[i - 1]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_times(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times
    }
}

/// How much noise each reverse step injects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "scale")]
pub enum NoiseRule {
    /// Deterministic sampling, σ = 0.
    Ode,
    /// σ̃_t = a.
    ConstDiffusion(f64),
    /// σ̃_t = a·sqrt(t/(1−t)).
    FlowGrpo(f64),
    /// Ancestral noise whose mean and variance coincide with the DDPM posterior.
    DdpmEquivalent,
}

/// Discrete noise of step `i` (from `t_i` to `t_{i−1}`): `(σ̃, σ)`.
pub fn step_noise(rule: NoiseRule, flow: &FlowSpec, grid: &TimeGrid, i: usize) -> Result<(f64, f64)> {
    if i == 0 || i > grid.n_steps() {
        return Err(Error::Contract(format!(
            "step index {i} outside 1..={}",
            grid.n_steps()
        )));
    }
    let t = grid.t(i);
    let dt = grid.dt(i);
    match rule {
        NoiseRule::Ode => Ok((0.0, 0.0)),
        NoiseRule::ConstDiffusion(a) => nonneg_scale(a).map(|_| (a, a * dt.sqrt())),
        NoiseRule::FlowGrpo(a) => {
            nonneg_scale(a)?;
            if t >= 1.0 {
                return Err(Error::Singular(format!(
                    "FlowGRPO diffusion a·sqrt(t/(1−t)) diverges at t = {t}"
                )));
            }
            let st = a * (t / (1.0 - t)).sqrt();
            Ok((st, st * dt.sqrt()))
        }
        NoiseRule::DdpmEquivalent => {
            let cur = ab_coeffs(flow, t)?;
            let prev = ab_coeffs(flow, grid.t(i - 1))?;
            let s = ddpm_equivalent_sigma(cur.a, cur.b, prev.a, prev.b)?;
            Ok((s / dt.sqrt(), s))
        }
    }
}

fn nonneg_scale(a: f64) -> Result<()> {
    if a >= 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "diffusion scale",
            value: a,
            domain: "[0, ∞)",
        })
    }
}

/// Ancestral σ for an affine flow:
/// `σ² = b²_{i−1}(b_i² − (a_i/a_{i−1})² b²_{i−1}) / b_i²`.
pub fn ddpm_equivalent_sigma(a_i: f64, b_i: f64, a_im1: f64, b_im1: f64) -> Result<f64> {
    if a_im1 <= 0.0 || b_i <= 0.0 {
        return Err(Error::Singular("ancestral noise needs a_{i-1} > 0 and b_i > 0".into()));
    }
    let r = a_i / a_im1;
    let var = b_im1 * b_im1 * (b_i * b_i - r * r * b_im1 * b_im1) / (b_i * b_i);
    Ok(var.max(0.0).sqrt())
}

/// Per-step reverse kernel coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelCoeffs {
    pub kappa: f64,
    pub omega: f64,
    pub sigma: f64,
    pub delta: f64,
    /// `Ωδ/σ`, present iff `σ > 0`.
    pub w: Option<f64>,
}

impl KernelCoeffs {
    pub fn new(kappa: f64, omega: f64, sigma: f64, delta: f64) -> Self {
        let w = (sigma > 0.0).then(|| omega * delta / sigma);
        Self {
            kappa,
            omega,
            sigma,
            delta,
            w,
        }
    }
}

/// `w = Ωδ/σ`.
pub fn sampler_weight(coeffs: &KernelCoeffs) -> Result<f64> {
    if coeffs.sigma > 0.0 {
        Ok(coeffs.omega * coeffs.delta / coeffs.sigma)
    } else {
        Err(Error::UndefinedWeight)
    }
}

/// δ for ε-prediction: `s_a − s_b = −δ(ε_a − ε_b)` with `δ = 1/b`.
pub fn delta_epsilon(b: f64) -> Result<f64> {
    if b > 0.0 {
        Ok(1.0 / b)
    } else {
        Err(Error::Singular("epsilon delta 1/b diverges at b = 0".into()))
    }
}

/// δ for v-prediction: `δ = −a / (ȧ b² − a ḃ b)`.
pub fn delta_velocity(ab: AbCoeffs) -> Result<f64> {
    let denom = ab.a_dot * ab.b * ab.b - ab.a * ab.b_dot * ab.b;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Singular("velocity delta is singular here".into()));
    }
    Ok(-ab.a / denom)
}

/// DDIM kernel for a VP flow written with `ᾱ`.
pub fn ddim_kernel(alpha_bar_i: f64, alpha_bar_im1: f64, sigma_i: f64) -> Result<KernelCoeffs> {
    if !(alpha_bar_i > 0.0 && alpha_bar_i <= alpha_bar_im1 && alpha_bar_im1 <= 1.0) {
        return Err(Error::Domain {
            what: "alpha_bar_i",
            value: alpha_bar_i,
            domain: "(0, alpha_bar_im1] with alpha_bar_im1 <= 1",
        });
    }
    let (a_i, b_i) = (alpha_bar_i.sqrt(), (1.0 - alpha_bar_i).sqrt());
    let (a_p, b_p) = (alpha_bar_im1.sqrt(), (1.0 - alpha_bar_im1).sqrt());
    affine_ddim_kernel(a_i, b_i, a_p, b_p, sigma_i, delta_epsilon(b_i)?)
}

/// DDIM kernel for an arbitrary affine flow:
/// `κ = a_{i−1}/a_i`, `Ω = (a_{i−1}/a_i) b_i² − sqrt(b²_{i−1} − σ²)·b_i`.
pub fn affine_ddim_kernel(a_i: f64, b_i: f64, a_im1: f64, b_im1: f64, sigma: f64, delta: f64) -> Result<KernelCoeffs> {
    if a_i <= 0.0 {
        return Err(Error::Singular("DDIM step needs a_i > 0".into()));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Domain {
            what: "sigma",
            value: sigma,
            domain: "[0, ∞)",
        });
    }
    let limit = b_im1 * b_im1;
    let sigma_sq = sigma * sigma;
    if sigma_sq > limit * (1.0 + 1e-12) {
        return Err(Error::InvalidNoise { sigma_sq, limit });
    }
    let ratio = a_im1 / a_i;
    let residual = (limit - sigma_sq).max(0.0).sqrt();
    let omega = ratio * b_i * b_i - residual * b_i;
    Ok(KernelCoeffs::new(ratio, omega, sigma, delta))
}

/// First-order SDE-DPM-Solver++ kernel for a VP flow written with `ᾱ`.
pub fn dpmpp_kernel(alpha_bar_i: f64, alpha_bar_im1: f64) -> Result<KernelCoeffs> {
    if !(alpha_bar_i > 0.0 && alpha_bar_i < 1.0 && alpha_bar_i <= alpha_bar_im1 && alpha_bar_im1 <= 1.0) {
        return Err(Error::Domain {
            what: "alpha_bar_i",
            value: alpha_bar_i,
            domain: "(0, alpha_bar_im1] ∩ (0, 1)",
        });
    }
    let (a_i, b_i) = (alpha_bar_i.sqrt(), (1.0 - alpha_bar_i).sqrt());
    let (a_p, b_p) = (alpha_bar_im1.sqrt(), (1.0 - alpha_bar_im1).sqrt());
    affine_dpmpp_kernel(a_i, b_i, a_p, b_p, delta_epsilon(b_i)?)
}

/// First-order SDE-DPM-Solver++ kernel for an arbitrary affine flow. With
/// `e^{−h} = (a_i b_{i−1})/(a_{i−1} b_i)`:
/// `κ = (b_{i−1}/b_i)e^{−h} + (a_{i−1}/a_i)(1 − e^{−2h})`,
/// `Ω = (a_{i−1}/a_i)(1 − e^{−2h}) b_i²`, `σ = b_{i−1} sqrt(1 − e^{−2h})`.
pub fn affine_dpmpp_kernel(a_i: f64, b_i: f64, a_im1: f64, b_im1: f64, delta: f64) -> Result<KernelCoeffs> {
    if a_i <= 0.0 || b_i <= 0.0 || a_im1 <= 0.0 {
        return Err(Error::Singular("DPM-Solver++ step needs a_i, b_i, a_{i-1} > 0".into()));
    }
    let e_h = (a_i * b_im1) / (a_im1 * b_i);
    if e_h > 1.0 + 1e-12 {
        return Err(Error::Domain {
            what: "log-SNR gap exp(-h)",
            value: e_h,
            domain: "[0, 1] (log-SNR must not decrease towards t = 0)",
        });
    }
    let e_h = e_h.min(1.0);
    let one_minus = 1.0 - e_h * e_h;
    let ratio = a_im1 / a_i;
    let kappa = (b_im1 / b_i) * e_h + ratio * one_minus;
    let omega = ratio * one_minus * b_i * b_i;
    let sigma = b_im1 * one_minus.sqrt();
    Ok(KernelCoeffs::new(kappa, omega, sigma, delta))
}

/// Euler step of the rectified-flow reverse SDE:
/// `κ = 1 + Δt/(1−t)`, `Ω = tΔt/(1−t) + σ²/2`, `σ = σ̃ sqrt(Δt)`, `δ = (1−t)/t`.
pub fn euler_rf_kernel(t_i: f64, dt: f64, sigma_tilde: f64) -> Result<KernelCoeffs> {
    if t_i <= 0.0 || t_i >= 1.0 {
        return Err(Error::Singular(format!(
            "Euler rectified-flow kernel is singular at t = {t_i}"
        )));
    }
    if !(dt > 0.0 && dt <= t_i) {
        return Err(Error::Domain {
            what: "dt",
            value: dt,
            domain: "(0, t_i]",
        });
    }
    if sigma_tilde < 0.0 || !sigma_tilde.is_finite() {
        return Err(Error::Domain {
            what: "sigma_tilde",
            value: sigma_tilde,
            domain: "[0, ∞)",
        });
    }
    let sigma = sigma_tilde * dt.sqrt();
    let kappa = 1.0 + dt / (1.0 - t_i);
    let omega = t_i * dt / (1.0 - t_i) + 0.5 * sigma * sigma;
    let delta = (1.0 - t_i) / t_i;
    Ok(KernelCoeffs::new(kappa, omega, sigma, delta))
}

/// Reverse sampler family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    /// DDIM with ε-prediction (any affine flow).
    Ddim,
    /// First-order SDE-DPM-Solver++ with ε-prediction; σ is fixed by the solver.
    DpmSolverPp,
    /// Euler-discrete rectified flow with v-prediction.
    EulerRf,
}

/// Coefficients of one reverse step plus its time metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCoeffs {
    pub i: usize,
    pub t: f64,
    pub dt: f64,
    pub sigma_tilde: f64,
    /// Kernel used when the step is stochastic.
    pub sde: KernelCoeffs,
    /// The same step with σ = 0.
    pub ode: KernelCoeffs,
}

/// Kernel coefficients of step `i` for the given sampler configuration.
pub fn step_coeffs(
    flow: &FlowSpec,
    grid: &TimeGrid,
    noise: NoiseRule,
    sampler: SamplerKind,
    i: usize,
) -> Result<StepCoeffs> {
    if i == 0 || i > grid.n_steps() {
        return Err(Error::Contract(format!(
            "step index {i} outside 1..={}",
            grid.n_steps()
        )));
    }
    let t = grid.t(i);
    let dt = grid.dt(i);
    let cur = ab_coeffs(flow, t)?;
    let prev = ab_coeffs(flow, grid.t(i - 1))?;
    let (sde, ode, sigma_tilde) = match sampler {
        SamplerKind::Ddim => {
            let (st, s) = step_noise(noise, flow, grid, i)?;
            let delta = delta_epsilon(cur.b)?;
            (
                affine_ddim_kernel(cur.a, cur.b, prev.a, prev.b, s, delta)?,
                affine_ddim_kernel(cur.a, cur.b, prev.a, prev.b, 0.0, delta)?,
                st,
            )
        }
        SamplerKind::DpmSolverPp => {
            let delta = delta_epsilon(cur.b)?;
            let sde = affine_dpmpp_kernel(cur.a, cur.b, prev.a, prev.b, delta)?;
            let ode = affine_ddim_kernel(cur.a, cur.b, prev.a, prev.b, 0.0, delta)?;
            (sde, ode, sde.sigma / dt.sqrt())
        }
        SamplerKind::EulerRf => {
            if flow.kind() != FlowKind::RectifiedFlow {
                return Err(Error::Config(
                    "the Euler-discrete sampler is defined for rectified flow only".into(),
                ));
            }
            let (st, _) = step_noise(noise, flow, grid, i)?;
            (euler_rf_kernel(t, dt, st)?, euler_rf_kernel(t, dt, 0.0)?, st)
        }
    };
    Ok(StepCoeffs {
        i,
        t,
        dt,
        sigma_tilde,
        sde,
        ode,
    })
}

/// Precomputed kernels for every step of a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub flow: FlowSpec,
    pub grid: TimeGrid,
    pub noise: NoiseRule,
    pub sampler: SamplerKind,
    steps: Vec<StepCoeffs>,
    ab: Vec<(f64, f64)>,
}

impl Schedule {
    /// Builds all steps `1..=N`; fails if any step is singular.
    pub fn new(flow: FlowSpec, grid: TimeGrid, noise: NoiseRule, sampler: SamplerKind) -> Result<Self> {
        let steps = (1..=grid.n_steps())
            .map(|i| step_coeffs(&flow, &grid, noise, sampler, i))
            .collect::<Result<Vec<_>>>()?;
        let ab = grid
            .times()
            .iter()
            .map(|&t| ab_coeffs(&flow, t).map(|c| (c.a, c.b)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            flow,
            grid,
            noise,
            sampler,
            steps,
            ab,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// Step `i ∈ 1..=N`.
    pub fn step(&self, i: usize) -> &StepCoeffs {
        &self.steps[i - 1]
    }

    pub fn steps(&self) -> &[StepCoeffs] {
        &self.steps
    }

    /// `(a, b)` at grid node `i ∈ 0..=N`.
    pub fn ab(&self, i: usize) -> (f64, f64) {
        self.ab[i]
    }

    /// Returns a copy with every Ω multiplied by `factor` (fault injection).
    pub fn with_omega_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.steps {
            s.sde = KernelCoeffs::new(s.sde.kappa, s.sde.omega * factor, s.sde.sigma, s.sde.delta);
            s.ode = KernelCoeffs::new(s.ode.kappa, s.ode.omega * factor, s.ode.sigma, s.ode.delta);
        }
        out
    }
}
