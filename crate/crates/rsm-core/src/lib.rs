//! Reward score matching laboratory.
//!
//! Everything here lives in two dimensions. The building blocks are:
//!
//! - [`flow_schedules`]: affine noise schedules and the per-step reverse
//!   kernel coefficients `κ, Ω, σ, δ, w`.
//! - [`mixture_oracle`]: Gaussian mixtures with closed-form scores, reward
//!   tilts and the exact optimal value guidance `Ψ*`.
//! - [`sampler`]: reverse-time rollouts recorded as branching trees.
//! - [`estimators`]: current-state, first-order and zeroth-order lookahead
//!   estimators of `Ψ*`, reward statistics and a noise-space ascent step.
//! - [`rsm_objective`]: the unified regression loss, its canonical gradient,
//!   clipping rules and the registry of fine-tuning methods.
//! - [`training`]: a small ε-prediction MLP with hand-written backprop,
//!   denoising score matching and reward fine-tuning.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod estimators;
pub mod flow_schedules;
pub mod mixture_oracle;
pub mod rng;
pub mod rsm_objective;
pub mod sampler;
pub mod training;
pub mod vec2;

mod error;

pub use error::{Error, Result};
pub use vec2::{Mat2, Vec2};
