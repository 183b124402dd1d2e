//! Consistency audit of the kernel algebra and the mixture oracles.
//!
//! The affine form `κx + Ωs` of every step is compared against independent
//! implementations of the three samplers written in their native
//! parameterisations; the `δ` and `w` identities are checked on every step;
//! and the closed-form tilt and scores are compared against numerical
//! integration and finite differences.

use std::fmt::Write as _;

use rand::Rng;
use rsm_core::flow_schedules::{
    ab_coeffs, delta_epsilon, delta_velocity, FlowSpec, NoiseRule, SamplerKind, Schedule, TimeGrid,
};
use rsm_core::mixture_oracle::{
    grid_tilt_weights, logpdf, marginal_at, score, tilt, GaussianMixture, GRID_HALF_WIDTH, GRID_POINTS,
};
use rsm_core::{rng, Vec2};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::fmt_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditReport {
    pub checks: Vec<Check>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn n_failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {} value={} tol={}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                fmt_f64(c.value),
                fmt_f64(c.tolerance)
            );
        }
        let _ = writeln!(
            s,
            "{} of {} checks passed",
            self.checks.len() - self.n_failed(),
            self.checks.len()
        );
        s
    }
}

fn rel_err(a: Vec2, b: Vec2) -> f64 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let n = (b[0] * b[0] + b[1] * b[1]).sqrt().max(1e-300);
    d / n
}

/// DDIM step through the ε-prediction and the posterior-mean estimate.
pub fn ddim_direct(a: f64, b: f64, ap: f64, bp: f64, sigma: f64, x: Vec2, s: Vec2) -> Vec2 {
    let eps = [-b * s[0], -b * s[1]];
    let x0 = [(x[0] - b * eps[0]) / a, (x[1] - b * eps[1]) / a];
    let dir = (bp * bp - sigma * sigma).sqrt();
    [ap * x0[0] + dir * eps[0], ap * x0[1] + dir * eps[1]]
}

/// First-order SDE-DPM-Solver++ step through the data prediction.
pub fn dpmpp_direct(a: f64, b: f64, ap: f64, bp: f64, x: Vec2, s: Vec2) -> Vec2 {
    let h = (ap / bp).ln() - (a / b).ln();
    let x0 = [(x[0] + b * b * s[0]) / a, (x[1] + b * b * s[1]) / a];
    let c_x = bp / b * (-h).exp();
    let c_0 = ap * (1.0 - (-2.0 * h).exp());
    [c_x * x[0] + c_0 * x0[0], c_x * x[1] + c_0 * x0[1]]
}

/// Euler step of the rectified-flow SDE written with the velocity.
pub fn euler_direct(t: f64, dt: f64, sigma_tilde: f64, x: Vec2, s: Vec2) -> Vec2 {
    let v = |k: usize| -x[k] / (1.0 - t) + (-t * t / (1.0 - t) - t) * s[k];
    let g2 = sigma_tilde * sigma_tilde;
    [
        x[0] - dt * (v(0) - 0.5 * g2 * s[0]),
        x[1] - dt * (v(1) - 0.5 * g2 * s[1]),
    ]
}

fn sampler_name(s: SamplerKind) -> &'static str {
    match s {
        SamplerKind::Ddim => "ddim",
        SamplerKind::DpmSolverPp => "dpmpp",
        SamplerKind::EulerRf => "euler-rf",
    }
}

/// Kernel equivalence and `δ`/`w` identities on one schedule.
fn audit_schedule(name: &str, sched: &Schedule, cfg: &crate::config::AuditConfig, seed: u64, out: &mut AuditReport) {
    let audited = sched.with_omega_scaled(cfg.omega_scale);
    let mut rng = rng::stream(seed);
    let n = sched.n_steps();
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.instances {
        let i = rng.gen_range(1..=n);
        let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let s = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let st = audited.step(i);
        let k = st.sde;
        let affine = [k.kappa * x[0] + k.omega * s[0], k.kappa * x[1] + k.omega * s[1]];
        let (a, b) = sched.ab(i);
        let (ap, bp) = sched.ab(i - 1);
        let direct = match sched.sampler {
            SamplerKind::Ddim => ddim_direct(a, b, ap, bp, k.sigma, x, s),
            SamplerKind::DpmSolverPp => dpmpp_direct(a, b, ap, bp, x, s),
            SamplerKind::EulerRf => euler_direct(st.t, st.dt, st.sigma_tilde, x, s),
        };
        worst = worst.max(rel_err(affine, direct));
    }
    out.checks.push(Check::new(
        format!("kernel-equivalence/{name}/{}", sampler_name(sched.sampler)),
        worst,
        cfg.kernel_rtol,
    ));

    let mut delta_err: f64 = 0.0;
    let mut w_err: f64 = 0.0;
    for st in audited.steps() {
        let ab = ab_coeffs(&sched.flow, st.t).expect("grid times lie in the flow's domain");
        let expected = match sched.sampler {
            SamplerKind::EulerRf => delta_velocity(ab),
            _ => delta_epsilon(ab.b),
        };
        if let Ok(d) = expected {
            delta_err = delta_err.max((st.sde.delta - d).abs() / d.abs().max(1.0));
        }
        if let Some(w) = st.sde.w {
            let lhs = w * st.sde.sigma;
            let rhs = st.sde.omega * st.sde.delta;
            w_err = w_err.max((lhs - rhs).abs() / rhs.abs().max(1.0));
        }
    }
    out.checks.push(Check::new(
        format!("delta-identity/{name}"),
        delta_err,
        cfg.identity_tol,
    ));
    out.checks
        .push(Check::new(format!("weight-identity/{name}"), w_err, cfg.identity_tol));
}

/// Closed-form tilt against grid integration, and analytic scores against
/// central differences of the log-density.
fn audit_oracle(gmm: &GaussianMixture, ecfg: &ExperimentConfig, out: &mut AuditReport) -> Result<()> {
    let cfg = &ecfg.audit;
    let setup = &ecfg.setup;
    let closed = tilt(gmm, &setup.reward, setup.alpha)?;
    let numeric = grid_tilt_weights(gmm, &setup.reward, setup.alpha, GRID_POINTS, GRID_HALF_WIDTH)?;
    let worst = closed
        .weights
        .iter()
        .zip(&numeric)
        .map(|(w, g)| (w - g).abs() / w.abs().max(1e-300))
        .fold(0.0, f64::max);
    out.checks.push(Check::new("tilt-weights", worst, cfg.oracle_tol));

    let flow = setup.flow()?;
    let mut rng = rng::stream(rng::key_from_path(ecfg.seed, &[0x5c0e]));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for m in [gmm, &closed] {
        for _ in 0..cfg.instances.min(200) {
            let t: f64 = rng.gen_range(0.0..0.95);
            let g = marginal_at(m, &flow, t)?;
            let x = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let s = score(&g, x);
            for d in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let fd = (logpdf(&g, xp) - logpdf(&g, xm)) / (2.0 * h);
                worst = worst.max((fd - s[d]).abs() / s[d].abs().max(1.0));
            }
        }
    }
    out.checks
        .push(Check::new("score-finite-difference", worst, cfg.oracle_tol));
    Ok(())
}

/// DDIM and DPM-Solver++ on VP, and Euler on a Flow-GRPO style rectified
/// flow grid that stops short of the singular prior.
pub fn canonical_schedules() -> Vec<(String, Schedule)> {
    let vp = FlowSpec::vp(0.05, 10.0).expect("valid VP endpoints");
    let grid = TimeGrid::uniform(50).expect("valid grid");
    let rf_grid = TimeGrid::shifted(10, 0.95, 3.0).expect("valid grid");
    vec![
        (
            "vp-ddim".into(),
            Schedule::new(vp.clone(), grid.clone(), NoiseRule::DdpmEquivalent, SamplerKind::Ddim)
                .expect("valid schedule"),
        ),
        (
            "vp-dpmpp".into(),
            Schedule::new(vp, grid, NoiseRule::DdpmEquivalent, SamplerKind::DpmSolverPp).expect("valid schedule"),
        ),
        (
            "rf-euler".into(),
            Schedule::new(
                FlowSpec::rectified(),
                rf_grid,
                NoiseRule::FlowGrpo(0.7),
                SamplerKind::EulerRf,
            )
            .expect("valid schedule"),
        ),
    ]
}

/// Runs every check; building the configured schedule may fail validation
/// (for example when the requested step noise exceeds `b_{i−1}`).
pub fn run_kernel_audit(cfg: &ExperimentConfig) -> Result<AuditReport> {
    let sched = cfg.setup.schedule()?;
    let mut report = AuditReport::default();
    audit_schedule("configured", &sched, &cfg.audit, cfg.seed, &mut report);
    if cfg.audit.include_canonical {
        for (k, (name, s)) in canonical_schedules().into_iter().enumerate() {
            audit_schedule(&name, &s, &cfg.audit, cfg.seed.wrapping_add(k as u64 + 1), &mut report);
        }
    }
    let gmm = cfg.setup.reference()?;
    audit_oracle(&gmm, cfg, &mut report)?;
    Ok(report)
}
