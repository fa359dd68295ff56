use nalgebra::DVector;
use rsjump::bounds::{find_bound_controls, zero_beta_policy, AffineProfile, BoundSign};
use rsjump::coefficients::{f_value, g_value};
use rsjump::model::{ControlVector, ValidatedModel};
use rsjump::reference;
use rsjump::simulate::{estimate_tilde_i, SimConfig};

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, whole: f64, m: f64, fm: f64, tol: f64, depth: u32) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1) + rec(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, whole, m, fm, tol, 50)
}

/// Scalar-factor `q` built from the public coefficient functions.
fn q_scalar(model: &ValidatedModel, h: &ControlVector, t: f64) -> f64 {
    let raw = model.raw();
    let big_b = raw.factors.big_b[0][0];
    let theta = model.theta();
    let loading = raw.assets.big_a0[0]
        + model.big_a_hat().column(0).dot(&h.0);
    let beta = theta / big_b * (1.0 - (big_b * (model.horizon() - t)).exp()) * loading;
    let zero = DVector::from_element(1, 0.0);
    let f0 = f_value(&zero, h, model).unwrap()[0];
    let ll: f64 = raw.factors.lambda[0].iter().map(|v| v * v).sum();
    let jumps: f64 = raw
        .jumps
        .atoms
        .iter()
        .map(|a| a.intensity * ((beta * a.xi[0]).exp() - 1.0 - beta * a.xi[0]))
        .sum();
    f0 * beta + 0.5 * ll * beta * beta + jumps + theta * g_value(&zero, h, model).unwrap()
}

#[test]
fn alpha_matches_adaptive_quadrature() {
    let model = ValidatedModel::new(reference::reference_model()).unwrap();
    for h in [[-0.16, 0.12], [0.5, -0.3], [0.0, 0.0], [1.0, 1.0]] {
        let h = ControlVector::from_slice(&h);
        let profile = AffineProfile::new(&model, &h).unwrap();
        for t in [0.0, 0.25, 0.7, 0.99] {
            let oracle = adaptive_simpson(&|s| q_scalar(&model, &h, s), t, model.horizon(), 1e-13);
            let a = profile.alpha(t);
            assert!((a - oracle).abs() < 1e-9, "h={:?} t={t}: {a} vs {oracle}", h.as_slice());
        }
    }
}

#[test]
fn profiles_satisfy_their_odes() {
    for raw in [reference::reference_model(), reference::two_factor_model()] {
        let model = ValidatedModel::new(raw).unwrap();
        let big_b = model.big_b().clone();
        let theta = model.theta();
        let m = model.n_assets();
        for h in [vec![0.0; m], (0..m).map(|i| 0.2 - 0.15 * i as f64).collect::<Vec<_>>()] {
            let h = ControlVector::from_slice(&h);
            let p = AffineProfile::new(&model, &h).unwrap();
            let eps = 1e-5;
            for k in 1..10 {
                let t = model.horizon() * k as f64 / 10.0;
                let t = t.min(model.horizon() - 2.0 * eps);
                let d_beta = (p.beta(t + eps) - p.beta(t - eps)) / (2.0 * eps);
                let rhs = -big_b.transpose() * p.beta(t) + p.loading() * theta;
                assert!((&d_beta - &rhs).amax() < 1e-8, "beta residual {}", (&d_beta - &rhs).amax());
                let d_alpha = (p.alpha(t + eps) - p.alpha(t - eps)) / (2.0 * eps);
                assert!((d_alpha + p.q(t)).abs() < 1e-8, "alpha residual {}", d_alpha + p.q(t));
            }
            assert!(p.beta(model.horizon()).amax() == 0.0);
            assert_eq!(p.alpha(model.horizon()), 0.0);
        }
    }
}

#[test]
fn affine_form_matches_tilted_monte_carlo() {
    let model = ValidatedModel::new(reference::reference_model()).unwrap();
    let h = ControlVector::from_slice(&[0.3, -0.1]);
    let p = AffineProfile::new(&model, &h).unwrap();
    let cfg = SimConfig { n_paths: 40_000, dt: 2e-3, seed: 11, antithetic: true, record_every: 0 };
    for x in [-0.5, 0.0, 0.4] {
        let exact = (p.alpha(0.0) + p.beta(0.0)[0] * x).exp();
        let mc = estimate_tilde_i(&model, &h, 0.0, &[x], &cfg).unwrap();
        let err = (mc.value - exact).abs();
        assert!(err < 4.0 * mc.std_error + 2e-3 * exact, "x={x}: mc {} ± {} vs {exact}", mc.value, mc.std_error);
    }
}

#[test]
fn bound_controls_on_reference_models() {
    for raw in [reference::reference_model(), reference::two_factor_model()] {
        let model = ValidatedModel::new(raw).unwrap();
        let bounds = find_bound_controls(&model).unwrap();
        assert_eq!(bounds.len(), 2 * model.n_factors());
        for (k, b) in bounds.iter().enumerate() {
            assert_eq!(b.component, k % model.n_factors());
            let want = if k < model.n_factors() { BoundSign::Negative } else { BoundSign::Positive };
            assert_eq!(b.sign, want);
            assert!(b.sign_margin() > 0.0);
            assert!(b.h_bar.0.amax() <= 5.0);
        }
    }
}

#[test]
fn zero_beta_on_two_factor_model() {
    let model = ValidatedModel::new(reference::two_factor_model()).unwrap();
    let zb = zero_beta_policy(&model).unwrap();
    let k = model.big_a0() + model.big_a_hat().tr_mul(&zb.h_check.0);
    assert!(k.amax() < 1e-12);
}
