use exitlab::flow::{
    build_conjugation_table, conjugation, deterministic_exit_time, integrate_flow, inverse_conjugation, Conjugation,
    FlowSolverConfig,
};
use exitlab::model::{validate_model, ModelInput, ModelSpec, Side};
use exitlab::theory::adaptive_simpson;
use proptest::prelude::*;
use std::sync::OnceLock;

fn model(b: &str, q_minus: f64, q_plus: f64) -> ModelSpec<f64> {
    validate_model(&ModelInput {
        b: b.into(),
        sigma: "1".into(),
        q_minus,
        q_plus,
        lambda: None,
        r: None,
    })
    .unwrap()
}

fn cubic() -> &'static (ModelSpec<f64>, Conjugation<f64>) {
    static C: OnceLock<(ModelSpec<f64>, Conjugation<f64>)> = OnceLock::new();
    C.get_or_init(|| {
        let m = model("x + x^3", -0.7, 0.7);
        let c = Conjugation::build(&m, 257, FlowSolverConfig::default()).unwrap();
        (m, c)
    })
}

fn cubic_f(x: f64) -> f64 {
    x / (1.0 + x * x).sqrt()
}

#[test]
fn cubic_conjugation_matches_closed_form() {
    let (_, c) = cubic();
    for k in 0..=28 {
        let x = (-0.7 + 0.05 * k as f64).clamp(-0.7, 0.7);
        assert!((c.f(x).unwrap() - cubic_f(x)).abs() < 1e-10, "x={x}");
    }
    assert!((c.f_qplus() - cubic_f(0.7)).abs() < 1e-10);
    assert!((c.f_qminus() + cubic_f(0.7)).abs() < 1e-10);
}

#[test]
fn conjugation_matches_quadrature_oracle() {
    // f'(x) b(x) = lambda f(x) gives f(x) = x exp(int_0^x (lambda/b(u) - 1/u) du);
    // for b = x (1 + 0.3 sin(x)^2) the integrand is -0.3 sin(u)^2 / (u (1 + 0.3 sin(u)^2)).
    let m = model("x*(1 + 0.3*sin(x)^2)", -1.0, 1.2);
    let cfg = FlowSolverConfig::default();
    let integrand = |u: f64| {
        if u == 0.0 {
            0.0
        } else {
            let s2 = u.sin().powi(2);
            -0.3 * s2 / (u * (1.0 + 0.3 * s2))
        }
    };
    for x in [-0.9, -0.4, 0.2, 0.6, 1.1] {
        let oracle = x * adaptive_simpson(integrand, 0.0, x, 1e-14).unwrap().exp();
        assert!((conjugation(&m, x, &cfg).unwrap() - oracle).abs() < 1e-9, "x={x}");
    }
}

#[test]
fn conjugation_converges_under_step_refinement() {
    let m = model("x + x^3", -0.7, 0.7);
    let coarse = conjugation(&m, 0.6, &FlowSolverConfig::new(1e-3, 1e-11).unwrap()).unwrap();
    let fine = conjugation(&m, 0.6, &FlowSolverConfig::new(5e-4, 1e-11).unwrap()).unwrap();
    assert!((coarse - fine).abs() < 1e-10);
    assert!((fine - cubic_f(0.6)).abs() < 1e-10);
}

#[test]
fn derivative_at_origin_is_one() {
    let (_, c) = cubic();
    let (f0, d1, d2) = c.derivatives(0.0, 1e-4).unwrap();
    assert_eq!(f0, 0.0);
    assert!((d1 - 1.0).abs() < 1e-6);
    assert!(d2.abs() < 1e-4);
    // f'(x) = (1 + x^2)^{-3/2}, f''(x) = -3x (1 + x^2)^{-5/2}
    let (_, d1, d2) = c.derivatives(0.5, 1e-4).unwrap();
    assert!((d1 - 1.25f64.powf(-1.5)).abs() < 1e-6);
    assert!((d2 + 1.5 * 1.25f64.powf(-2.5)).abs() < 1e-4);
}

#[test]
fn table_invariants() {
    let (m, _) = cubic();
    let t = build_conjugation_table(m, 129, &FlowSolverConfig::default()).unwrap();
    assert!(t.f_values.windows(2).all(|w| w[0] < w[1]));
    let mid = t.grid.iter().position(|&x| x == 0.0).unwrap();
    assert!(t.f_values[mid].abs() < 1e-11);
    let h = t.grid[mid + 1];
    assert!(((t.f_values[mid + 1] - t.f_values[mid - 1]) / (2.0 * h) - 1.0).abs() < 1e-3);
    assert!(build_conjugation_table(m, 10, &FlowSolverConfig::default()).is_err());
}

#[test]
fn inverse_round_trip() {
    let (m, c) = cubic();
    for y in [-0.5, -0.2, 0.0, 0.1, 0.55] {
        let x = inverse_conjugation(m, c.table(), y, c.config()).unwrap();
        assert!((c.f(x).unwrap() - y).abs() < 1e-10);
        assert!((x - y / (1.0 - y * y).sqrt()).abs() < 1e-9);
    }
    assert!(c.g(0.6).is_err());
}

#[test]
fn linear_exit_time() {
    let m = model("x", -1.0, 1.0);
    let cfg = FlowSolverConfig::default();
    let (t, side) = deterministic_exit_time(&m, 0.5, &cfg).unwrap();
    assert!((t - 2f64.ln()).abs() < 1e-9);
    assert_eq!(side, Side::Plus);
    let (t, side) = deterministic_exit_time(&m, -0.1, &cfg).unwrap();
    assert!((t - 10f64.ln()).abs() < 1e-9);
    assert_eq!(side, Side::Minus);
    assert!(deterministic_exit_time(&m, 0.0, &cfg).is_err());
}

#[test]
fn cubic_exit_time_matches_closed_form() {
    // x(t)^2 / (1 + x(t)^2) = e^{2t} x0^2 / (1 + x0^2)
    let m = model("x + x^3", -0.7, 0.7);
    let (t, _) = deterministic_exit_time(&m, 0.1, &FlowSolverConfig::default()).unwrap();
    let exact = (cubic_f(0.7) / cubic_f(0.1)).ln();
    assert!((t - exact).abs() < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conjugates_the_flow(u in 0.02f64..0.98, s in 0.0f64..1.0) {
        let (m, c) = cubic();
        let cfg = c.config();
        let x = -0.7 + 1.4 * u;
        let t_exit = deterministic_exit_time(m, x, cfg).unwrap().0;
        let t = -2.0 + s * ((0.9 * t_exit).min(3.0) + 2.0);
        let lhs = c.f(integrate_flow(m, x, t, cfg).unwrap()).unwrap();
        prop_assert!((lhs - (m.lambda * t).exp() * c.f(x).unwrap()).abs() <= 1e-6);
    }

    #[test]
    fn flow_is_a_semigroup(x in -0.2f64..0.2, t in 0.0f64..0.45, s in 0.0f64..0.45) {
        let (m, c) = cubic();
        let cfg = c.config();
        let once = integrate_flow(m, x, t + s, cfg).unwrap();
        let twice = integrate_flow(m, integrate_flow(m, x, s, cfg).unwrap(), t, cfg).unwrap();
        prop_assert!((once - twice).abs() < 1e-10);
        let back = integrate_flow(m, integrate_flow(m, x, t, cfg).unwrap(), -t, cfg).unwrap();
        prop_assert!((back - x).abs() < 1e-10);
    }

    #[test]
    fn conjugation_preserves_order(a in -0.69f64..0.69, b in -0.69f64..0.69) {
        prop_assume!((a - b).abs() > 1e-6);
        let (_, c) = cubic();
        prop_assert_eq!(a < b, c.f(a).unwrap() < c.f(b).unwrap());
    }
}
