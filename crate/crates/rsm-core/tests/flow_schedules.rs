use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsm_core::flow_schedules::*;
use rsm_core::Error;

fn rel_err(a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let n = (b[0] * b[0] + b[1] * b[1]).sqrt().max(1e-300);
    d / n
}

fn mean_step(k: &KernelCoeffs, x: [f64; 2], s: [f64; 2]) -> [f64; 2] {
    [k.kappa * x[0] + k.omega * s[0], k.kappa * x[1] + k.omega * s[1]]
}

#[test]
fn rf_coefficients_at_half() {
    let c = ab_coeffs(&FlowSpec::rectified(), 0.5).unwrap();
    assert_eq!((c.a, c.b, c.a_dot, c.b_dot), (0.5, 0.5, -1.0, 1.0));
}

#[test]
fn vp_boundary_and_golden() {
    let vp = FlowSpec::vp(0.1, 20.0).unwrap();
    let c = ab_coeffs(&vp, 0.0).unwrap();
    assert_eq!((c.a, c.b), (1.0, 0.0));
    // ∫₀^½ β = 0.1·½ + ½·19.9·¼, integrated by hand.
    let c = ab_coeffs(&vp, 0.5).unwrap();
    assert_relative_eq!(c.a, 0.2811828807967524, max_relative = 1e-9);
    assert_relative_eq!(c.b, 0.9596542020680363, max_relative = 1e-9);
}

#[test]
fn vp_off_node_matches_closed_form_integral() {
    let vp = FlowSpec::vp(0.1, 20.0).unwrap();
    for &t in &[0.123_456_7, 0.333_333, 0.876_543_21, 0.999_95] {
        let integral: f64 = 0.1 * t + 0.5 * 19.9 * t * t;
        let a = (-0.5 * integral).exp();
        assert_relative_eq!(ab_coeffs(&vp, t).unwrap().a, a, max_relative = 1e-7);
    }
}

#[test]
fn out_of_range_time_is_a_domain_error() {
    for flow in [
        FlowSpec::rectified(),
        FlowSpec::vp(0.1, 20.0).unwrap(),
        FlowSpec::ve(0.01, 50.0).unwrap(),
    ] {
        assert!(matches!(ab_coeffs(&flow, 1.5), Err(Error::Domain { .. })));
        assert!(matches!(ab_coeffs(&flow, -0.1), Err(Error::Domain { .. })));
    }
}

#[test]
fn ddim_examples() {
    let id = ddim_kernel(0.5, 0.5, 0.0).unwrap();
    assert_relative_eq!(id.kappa, 1.0);
    assert!(id.omega.abs() < 1e-15);

    let k = ddim_kernel(0.5, 0.8, 0.0).unwrap();
    assert_relative_eq!(k.kappa, 1.2649110640673518, max_relative = 1e-12);
    assert_relative_eq!(k.omega, 0.31622776601683805, max_relative = 1e-12);

    let k = ddim_kernel(0.5, 0.8, 0.1).unwrap();
    assert_relative_eq!(k.omega, 0.32423483188522717, max_relative = 1e-12);
    assert_relative_eq!(k.delta, 1.0 / 0.5f64.sqrt(), max_relative = 1e-15);

    assert!(matches!(ddim_kernel(0.5, 0.8, 0.5), Err(Error::InvalidNoise { .. })));
}

#[test]
fn ddim_reverse_step_golden() {
    let k = ddim_kernel(0.5, 0.8, 0.0).unwrap();
    let y = rsm_core::sampler::reverse_step([1.0, 0.0], &k, [0.0, 0.0], None).unwrap();
    assert_relative_eq!(y[0], 1.26491, epsilon = 1e-5);
    assert_eq!(y[1], 0.0);
}

#[test]
fn dpmpp_examples() {
    let k = dpmpp_kernel(0.5, 0.5).unwrap();
    assert_eq!(k.sigma, 0.0);
    assert!(k.omega.abs() < 1e-15);

    let k = dpmpp_kernel(0.5, 0.8).unwrap();
    assert_relative_eq!(k.kappa, 1.2649110640673515, max_relative = 1e-12);
    assert_relative_eq!(k.omega, 0.47434164902525694, max_relative = 1e-12);
    assert_relative_eq!(k.sigma, 0.38729833462074165, max_relative = 1e-12);

    let near_one = dpmpp_kernel(0.5, 1.0 - 1e-12).unwrap();
    assert!(near_one.sigma < 1e-5);
}

#[test]
fn euler_examples() {
    let k = euler_rf_kernel(0.5, 0.1, 0.0).unwrap();
    assert_relative_eq!(k.kappa, 1.2, max_relative = 1e-15);
    assert_relative_eq!(k.omega, 0.1, max_relative = 1e-15);
    assert_relative_eq!(k.delta, 1.0, max_relative = 1e-15);
    assert!(k.w.is_none());

    // w = Ωδ/σ with Ω = 0.01 + 0.005, δ = 1, σ = 0.1.
    let k = euler_rf_kernel(0.5, 0.01, 1.0).unwrap();
    assert_relative_eq!(k.w.unwrap(), 0.15, max_relative = 1e-12);
    assert_relative_eq!(sampler_weight(&k).unwrap(), 0.15, max_relative = 1e-12);

    assert!(matches!(euler_rf_kernel(1.0, 0.1, 1.0), Err(Error::Singular(_))));
    assert!(matches!(
        euler_rf_kernel(1.0 - 1e-17, 0.1, 1.0),
        Err(Error::Singular(_))
    ));
    assert!(matches!(euler_rf_kernel(0.0, 0.1, 1.0), Err(Error::Singular(_))));
}

#[test]
fn sampler_weight_examples() {
    let k = KernelCoeffs::new(1.0, 0.2, 0.1, 2.0);
    assert_relative_eq!(sampler_weight(&k).unwrap(), 4.0, max_relative = 1e-15);
    let k = KernelCoeffs::new(1.0, 0.2, 0.0, 2.0);
    assert_eq!(sampler_weight(&k), Err(Error::UndefinedWeight));
}

/// Directly coded DDIM update in ε-form.
fn ddim_direct(abar: f64, abar_p: f64, sigma: f64, x: [f64; 2], s: [f64; 2]) -> [f64; 2] {
    let eps = [-(1.0 - abar).sqrt() * s[0], -(1.0 - abar).sqrt() * s[1]];
    let x0 = [
        (x[0] - (1.0 - abar).sqrt() * eps[0]) / abar.sqrt(),
        (x[1] - (1.0 - abar).sqrt() * eps[1]) / abar.sqrt(),
    ];
    let dir = (1.0 - abar_p - sigma * sigma).sqrt();
    [
        abar_p.sqrt() * x0[0] + dir * eps[0],
        abar_p.sqrt() * x0[1] + dir * eps[1],
    ]
}

/// Directly coded Euler step of the rectified-flow SDE in velocity form.
fn euler_direct(t: f64, dt: f64, sigma_tilde: f64, x: [f64; 2], s: [f64; 2]) -> [f64; 2] {
    // v = (ȧ/a)x + (ȧb²/a − ḃb)s for a = 1 − t, b = t.
    let v = |k: usize| -x[k] / (1.0 - t) + (-t * t / (1.0 - t) - t) * s[k];
    let g2 = sigma_tilde * sigma_tilde;
    [
        x[0] - dt * (v(0) - 0.5 * g2 * s[0]),
        x[1] - dt * (v(1) - 0.5 * g2 * s[1]),
    ]
}

/// Directly coded first-order SDE-DPM-Solver++ update through the data
/// prediction.
fn dpmpp_direct(a: f64, b: f64, ap: f64, bp: f64, x: [f64; 2], s: [f64; 2]) -> [f64; 2] {
    let lam = (a / b).ln();
    let lam_p = (ap / bp).ln();
    let h = lam_p - lam;
    let x0 = [(x[0] + b * b * s[0]) / a, (x[1] + b * b * s[1]) / a];
    let c_x = bp / b * (-h).exp();
    let c_0 = ap * (1.0 - (-2.0 * h).exp());
    [c_x * x[0] + c_0 * x0[0], c_x * x[1] + c_0 * x0[1]]
}

#[test]
fn kernel_equivalence_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let s = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];

        let abar_p: f64 = rng.gen_range(0.05..0.999);
        let abar = abar_p * rng.gen_range(0.05..0.999);
        let sigma = rng.gen_range(0.0..1.0) * (1.0 - abar_p).sqrt();
        let k = ddim_kernel(abar, abar_p, sigma).unwrap();
        worst = worst.max(rel_err(mean_step(&k, x, s), ddim_direct(abar, abar_p, sigma, x, s)));

        let t = rng.gen_range(0.02..0.98);
        let dt = rng.gen_range(0.001..0.02f64).min(t);
        let st = rng.gen_range(0.0..2.0);
        let k = euler_rf_kernel(t, dt, st).unwrap();
        worst = worst.max(rel_err(mean_step(&k, x, s), euler_direct(t, dt, st, x, s)));

        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        let (ap, bp) = (abar_p.sqrt(), (1.0 - abar_p).sqrt());
        let k = dpmpp_kernel(abar, abar_p).unwrap();
        worst = worst.max(rel_err(mean_step(&k, x, s), dpmpp_direct(a, b, ap, bp, x, s)));
    }
    assert!(worst < 1e-10, "worst relative error {worst}");
}

#[test]
fn delta_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vp = FlowSpec::vp(0.1, 20.0).unwrap();
    for _ in 0..1000 {
        let t: f64 = rng.gen_range(0.01..0.99);
        let sa = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let sb = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];

        // ε-parameterisation: ε = −b s.
        let ab = ab_coeffs(&vp, t).unwrap();
        let d = delta_epsilon(ab.b).unwrap();
        for k in 0..2 {
            let ea = -ab.b * sa[k];
            let eb = -ab.b * sb[k];
            let lhs = -d * (ea - eb);
            assert!((lhs - (sa[k] - sb[k])).abs() <= 1e-12 * (1.0 + (sa[k] - sb[k]).abs()));
        }

        // v-parameterisation on the rectified flow.
        let rf = ab_coeffs(&FlowSpec::rectified(), t).unwrap();
        let d = delta_velocity(rf).unwrap();
        let v =
            |s: [f64; 2], k: usize| rf.a_dot / rf.a * x[k] + (rf.a_dot * rf.b * rf.b / rf.a - rf.b_dot * rf.b) * s[k];
        for k in 0..2 {
            let lhs = -d * (v(sa, k) - v(sb, k));
            assert!((lhs - (sa[k] - sb[k])).abs() <= 1e-12 * (1.0 + (sa[k] - sb[k]).abs()));
        }
    }
}

#[test]
fn weight_identity_on_schedules() {
    let cases = [
        (
            FlowSpec::vp(0.1, 20.0).unwrap(),
            NoiseRule::DdpmEquivalent,
            SamplerKind::Ddim,
        ),
        (
            FlowSpec::vp(0.1, 20.0).unwrap(),
            NoiseRule::DdpmEquivalent,
            SamplerKind::DpmSolverPp,
        ),
        (
            FlowSpec::ve(0.01, 50.0).unwrap(),
            NoiseRule::DdpmEquivalent,
            SamplerKind::Ddim,
        ),
    ];
    for (flow, noise, sampler) in cases {
        let sched = Schedule::new(flow, TimeGrid::uniform(50).unwrap(), noise, sampler).unwrap();
        for st in sched.steps() {
            if st.sde.sigma > 0.0 {
                let w = st.sde.w.unwrap();
                let lhs = w * st.sde.sigma;
                let rhs = st.sde.omega * st.sde.delta;
                assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            } else {
                assert!(st.sde.w.is_none());
            }
        }
    }
    let grid = TimeGrid::from_times((0..=50).map(|k| 0.98 * k as f64 / 50.0).chain([1.0]).collect()).unwrap();
    let rf = FlowSpec::rectified();
    for i in 1..grid.n_steps() {
        let c = step_coeffs(&rf, &grid, NoiseRule::ConstDiffusion(1.0), SamplerKind::EulerRf, i);
        if let Ok(c) = c {
            if let Some(w) = c.sde.w {
                assert!((w * c.sde.sigma - c.sde.omega * c.sde.delta).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn rf_schedule_is_singular_at_the_prior() {
    let r = Schedule::new(
        FlowSpec::rectified(),
        TimeGrid::uniform(10).unwrap(),
        NoiseRule::FlowGrpo(0.7),
        SamplerKind::EulerRf,
    );
    assert!(r.is_err());
}

#[test]
fn ode_rule_has_no_noise() {
    let sched = Schedule::new(
        FlowSpec::vp(0.1, 20.0).unwrap(),
        TimeGrid::uniform(20).unwrap(),
        NoiseRule::Ode,
        SamplerKind::Ddim,
    )
    .unwrap();
    assert!(sched.steps().iter().all(|s| s.sde.sigma == 0.0));
}

#[test]
fn grid_validation() {
    assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    assert!(TimeGrid::from_times(vec![0.1, 1.0]).is_err());
    assert!(TimeGrid::uniform(0).is_err());
}

proptest! {
    #[test]
    fn vp_preserves_variance(t in 0.0f64..=1.0, lo in 0.01f64..1.0, span in 0.0f64..30.0) {
        let vp = FlowSpec::vp(lo, lo + span).unwrap();
        let c = ab_coeffs(&vp, t).unwrap();
        prop_assert!((c.a * c.a + c.b * c.b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn vp_alpha_bar_decreases(t in 0.0f64..0.999, lo in 0.01f64..1.0, span in 0.0f64..30.0) {
        let vp = FlowSpec::vp(lo, lo + span).unwrap();
        prop_assert!(vp.alpha_bar(t + 1e-3).unwrap() < vp.alpha_bar(t).unwrap());
    }

    #[test]
    fn ddim_weight_identity(abar_p in 0.05f64..0.999, frac in 0.05f64..0.999, u in 0.01f64..1.0) {
        let abar = abar_p * frac;
        let sigma = u * (1.0 - abar_p).sqrt();
        let k = ddim_kernel(abar, abar_p, sigma).unwrap();
        let w = k.w.unwrap();
        prop_assert!((w * k.sigma - k.omega * k.delta).abs() <= 1e-12 * (k.omega * k.delta).abs().max(1.0));
    }

    #[test]
    fn uniform_grid_deltas_sum_to_one(n in 1usize..500) {
        let g = TimeGrid::uniform(n).unwrap();
        let sum: f64 = g.deltas().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(g.deltas().iter().all(|d| *d > 0.0));
    }
}

#[test]
fn truncated_and_shifted_grids() {
    assert!(TimeGrid::from_times(vec![0.0, 0.5, 1.5]).is_err());
    let g = TimeGrid::from_times(vec![0.0, 0.4, 0.9]).unwrap();
    assert_eq!(g.n_steps(), 2);

    let s = TimeGrid::shifted(4, 1.0, 3.0).unwrap();
    let golden = [0.0, 0.5, 0.75, 0.9, 1.0];
    for (a, b) in s.times().iter().zip(golden) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(TimeGrid::shifted(4, 1.0, 1.0).unwrap(), TimeGrid::uniform(4).unwrap());
    assert!(TimeGrid::shifted(0, 1.0, 3.0).is_err());
    assert!(TimeGrid::shifted(4, 1.0, 0.0).is_err());

    // Euler rectified flow builds on a grid that stops short of t = 1
    let sched = Schedule::new(
        FlowSpec::rectified(),
        TimeGrid::shifted(10, 0.95, 3.0).unwrap(),
        NoiseRule::FlowGrpo(0.7),
        SamplerKind::EulerRf,
    )
    .unwrap();
    assert!(sched.steps().iter().all(|s| s.sde.w.is_some()));
}
