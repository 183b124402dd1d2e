//! Closed-form Gaussian mixture machinery in two dimensions.
//!
//! A linear reward `r(x) = cᵀx + b` tilts an isotropic mixture into another
//! isotropic mixture, and affine noising keeps it a mixture, so the
//! reference and reward-optimal scores are available exactly at every time.
//! Their difference is the optimal value guidance `Ψ*`.

use serde::{Deserialize, Serialize};

use crate::flow_schedules::{ab_coeffs, FlowSpec};
use crate::vec2::{self, Vec2};
use crate::{Error, Result};

/// Isotropic Gaussian mixture `Σ_k w_k N(μ_k, var·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec2>,
    pub component_var: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec2>, component_var: f64) -> Result<Self> {
        let g = Self {
            weights,
            means,
            component_var,
        };
        g.validate()?;
        Ok(g)
    }

    /// Single component `N(mean, var·I)`.
    pub fn gaussian(mean: Vec2, var: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], var)
    }

    /// Three unit-variance components on an equilateral triangle of
    /// circumradius `2√3`, equally weighted.
    pub fn toy() -> Self {
        let s3 = 3f64.sqrt();
        Self {
            weights: vec![1.0 / 3.0; 3],
            means: vec![[3.0, -s3], [-3.0, -s3], [0.0, 2.0 * s3]],
            component_var: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.means.len() {
            return Err(Error::Config(
                "mixture needs at least one component and one weight per mean".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if !(self.component_var > 0.0 && self.component_var.is_finite()) {
            return Err(Error::Config("component variance must be positive".into()));
        }
        if self.means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Mixture mean `Σ w_k μ_k`.
    pub fn mean(&self) -> Vec2 {
        self.weights
            .iter()
            .zip(&self.means)
            .fold([0.0, 0.0], |acc, (w, m)| vec2::axpy(acc, *w, *m))
    }

    /// Draws one sample using two uniforms and a normal pair.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (idx, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = idx;
                break;
            }
        }
        let z = crate::rng::normal2(rng);
        vec2::axpy(self.means[k], self.component_var.sqrt(), z)
    }

    /// Log responsibilities (unnormalised) and their log-sum-exp.
    fn log_terms(&self, x: Vec2) -> (Vec<f64>, f64) {
        let inv = 1.0 / self.component_var;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w.ln() - 0.5 * inv * vec2::norm_sq(vec2::sub(x, *m)))
            .collect();
        let lse = log_sum_exp(&terms);
        (terms, lse)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `r(x) = cᵀx + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearReward {
    pub slope: Vec2,
    pub intercept: f64,
}

impl LinearReward {
    pub fn new(slope: Vec2, intercept: f64) -> Result<Self> {
        if !slope.iter().all(|c| c.is_finite()) || !intercept.is_finite() {
            return Err(Error::Config("reward coefficients must be finite".into()));
        }
        Ok(Self { slope, intercept })
    }

    /// `r(x) = x[0]/2 + 3`.
    pub fn toy() -> Self {
        Self {
            slope: [0.5, 0.0],
            intercept: 3.0,
        }
    }

    pub fn eval(&self, x: Vec2) -> f64 {
        vec2::dot(self.slope, x) + self.intercept
    }

    pub fn grad(&self) -> Vec2 {
        self.slope
    }
}

/// Reference mixture, its tilt by `exp(r/α)`, and `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedPair {
    pub reference: GaussianMixture,
    pub target: GaussianMixture,
    pub reward: LinearReward,
    pub alpha: f64,
}

/// Relative tolerance of the construction-time check against grid integration.
pub const TILT_CHECK_RTOL: f64 = 1e-6;

impl TiltedPair {
    /// Builds the pair and checks the closed-form tilt against
    /// [`grid_tilt_weights`].
    pub fn new(reference: GaussianMixture, reward: LinearReward, alpha: f64) -> Result<Self> {
        let target = tilt(&reference, &reward, alpha)?;
        let numeric = grid_tilt_weights(&reference, &reward, alpha, GRID_POINTS, GRID_HALF_WIDTH)?;
        for (k, (w, g)) in target.weights.iter().zip(&numeric).enumerate() {
            if (w - g).abs() > TILT_CHECK_RTOL * w.abs().max(1e-300) && (w - g).abs() > 1e-12 {
                return Err(Error::Contract(format!(
                    "tilted weight {k}: closed form {w} vs grid integration {g}"
                )));
            }
        }
        Ok(Self {
            reference,
            target,
            reward,
            alpha,
        })
    }

    /// The three-component toy with `r = x[0]/2 + 3` at the given `α`.
    pub fn toy(alpha: f64) -> Result<Self> {
        Self::new(GaussianMixture::toy(), LinearReward::toy(), alpha)
    }
}

/// Reward tilt `p*(x) ∝ p(x) exp(r(x)/α)` in closed form.
pub fn tilt(reference: &GaussianMixture, reward: &LinearReward, alpha: f64) -> Result<GaussianMixture> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain {
            what: "alpha",
            value: alpha,
            domain: "(0, ∞)",
        });
    }
    reference.validate()?;
    let var = reference.component_var;
    let c = reward.slope;
    let shift = vec2::scale(c, var / alpha);
    let quad = var * vec2::norm_sq(c) / (2.0 * alpha * alpha);
    let logs: Vec<f64> = reference
        .weights
        .iter()
        .zip(&reference.means)
        .map(|(w, m)| w.ln() + vec2::dot(c, *m) / alpha + quad)
        .collect();
    let lse = log_sum_exp(&logs);
    Ok(GaussianMixture {
        weights: logs.iter().map(|l| (l - lse).exp()).collect(),
        means: reference.means.iter().map(|m| vec2::add(*m, shift)).collect(),
        component_var: var,
    })
}

/// Points per axis of the integration oracle.
pub const GRID_POINTS: usize = 400;
/// The oracle integrates over `[−12, 12]²`.
pub const GRID_HALF_WIDTH: f64 = 12.0;

/// Tilted component masses `∫ w_k N_k(x) e^{r(x)/α} dx`, normalised, by a
/// midpoint rule on an `n × n` grid over `[−L, L]²`.
pub fn grid_tilt_weights(
    reference: &GaussianMixture,
    reward: &LinearReward,
    alpha: f64,
    n: usize,
    half_width: f64,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::Domain {
            what: "alpha",
            value: alpha,
            domain: "(0, ∞)",
        });
    }
    let h = 2.0 * half_width / n as f64;
    let var = reference.component_var;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var);
    let mut mass = vec![0.0; reference.n_components()];
    // The largest peak of the tilted integrands; subtracting it keeps the
    // exponentials in range and cancels on normalisation.
    let c = reward.slope;
    let offset = reward.intercept / alpha
        + reference
            .means
            .iter()
            .map(|m| vec2::dot(c, *m) / alpha + var * vec2::norm_sq(c) / (2.0 * alpha * alpha))
            .fold(f64::NEG_INFINITY, f64::max);
    for (k, (w, m)) in reference.weights.iter().zip(&reference.means).enumerate() {
        let mut acc = 0.0;
        for ix in 0..n {
            let x = -half_width + (ix as f64 + 0.5) * h;
            let mut col = 0.0;
            for iy in 0..n {
                let y = -half_width + (iy as f64 + 0.5) * h;
                let d = vec2::norm_sq([x - m[0], y - m[1]]);
                col += (-0.5 * d / var + reward.eval([x, y]) / alpha - offset).exp();
            }
            acc += col;
        }
        mass[k] = w * norm * acc * h * h;
    }
    let total: f64 = mass.iter().sum();
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// Noised marginal at time `t`: means scaled by `a_t`, variance `a²var + b²`.
pub fn marginal_at(gmm: &GaussianMixture, flow: &FlowSpec, t: f64) -> Result<GaussianMixture> {
    let ab = ab_coeffs(flow, t)?;
    Ok(GaussianMixture {
        weights: gmm.weights.clone(),
        means: gmm.means.iter().map(|m| vec2::scale(*m, ab.a)).collect(),
        component_var: ab.a * ab.a * gmm.component_var + ab.b * ab.b,
    })
}

/// `∇ log p(x)`, responsibility-weighted and log-sum-exp stabilised.
pub fn score(gmm: &GaussianMixture, x: Vec2) -> Vec2 {
    let (terms, lse) = gmm.log_terms(x);
    let inv = 1.0 / gmm.component_var;
    terms.iter().zip(&gmm.means).fold([0.0, 0.0], |acc, (l, m)| {
        vec2::axpy(acc, -(l - lse).exp() * inv, vec2::sub(x, *m))
    })
}

/// `log p(x)`.
pub fn logpdf(gmm: &GaussianMixture, x: Vec2) -> f64 {
    let (_, lse) = gmm.log_terms(x);
    lse - (2.0 * std::f64::consts::PI * gmm.component_var).ln()
}

/// Posterior mean estimate `x̂_0 = (x + b² s)/a`.
pub fn tweedie(x_t: Vec2, s: Vec2, a: f64, b: f64) -> Result<Vec2> {
    if !(a > 0.0) {
        return Err(Error::Singular(format!("Tweedie division by a = {a}")));
    }
    Ok(vec2::scale(vec2::axpy(x_t, b * b, s), 1.0 / a))
}

/// Exact `E[x_0 | x_t]` for a mixture noised to `x_t = a x_0 + b ε`.
pub fn posterior_mean(gmm: &GaussianMixture, a: f64, b: f64, x: Vec2) -> Vec2 {
    let var = gmm.component_var;
    let tot = a * a * var + b * b;
    let noised = GaussianMixture {
        weights: gmm.weights.clone(),
        means: gmm.means.iter().map(|m| vec2::scale(*m, a)).collect(),
        component_var: tot,
    };
    let (terms, lse) = noised.log_terms(x);
    let gain = a * var / tot;
    terms.iter().zip(&gmm.means).fold([0.0, 0.0], |acc, (l, m)| {
        let post = vec2::axpy(*m, gain, vec2::sub(x, vec2::scale(*m, a)));
        vec2::axpy(acc, (l - lse).exp(), post)
    })
}

/// `Ψ*_t(x) = ∇log p*_t(x) − ∇log p^ref_t(x)`.
pub fn psi_star(pair: &TiltedPair, flow: &FlowSpec, t: f64, x: Vec2) -> Result<Vec2> {
    let target = marginal_at(&pair.target, flow, t)?;
    let reference = marginal_at(&pair.reference, flow, t)?;
    Ok(vec2::sub(score(&target, x), score(&reference, x)))
}

/// Expected reward under a mixture.
pub fn expected_reward(gmm: &GaussianMixture, reward: &LinearReward) -> f64 {
    reward.eval(gmm.mean())
}
