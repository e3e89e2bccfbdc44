use exitlab::flow::{Conjugation, FlowSolverConfig};
use exitlab::model::{choose_neighborhood, validate_model, ModelError, ModelInput, ModelSpec, Violation};
use exitlab::presets;

fn input(b: &str, sigma: &str, q_minus: f64, q_plus: f64) -> ModelInput {
    ModelInput {
        b: b.into(),
        sigma: sigma.into(),
        q_minus,
        q_plus,
        lambda: None,
        r: None,
    }
}

fn conj(m: &ModelSpec<f64>) -> Conjugation<f64> {
    Conjugation::build(m, 257, FlowSolverConfig::default()).unwrap()
}

#[test]
fn linear_field() {
    let m: ModelSpec<f64> = validate_model(&input("x", "1", -1.0, 1.0)).unwrap();
    assert_eq!(m.lambda, 1.0);
    assert!(m.eta_bound <= 1e-12);
    assert!(m.is_linear_drift());
}

#[test]
fn cubic_field() {
    let m: ModelSpec<f64> = validate_model(&input("x + x^3", "1", -0.7, 0.7)).unwrap();
    assert!((m.lambda - 1.0).abs() < 1e-12);
    assert!(!m.is_linear_drift());
}

#[test]
fn logistic_field_has_a_second_zero() {
    let err = validate_model::<f64>(&input("x*(1-x)", "1", -0.5, 1.5)).unwrap_err();
    let ModelError::Invalid(v) = err else { panic!("{err:?}") };
    assert!(v
        .iter()
        .any(|e| matches!(e, Violation::ExtraZero { location } if (location - 1.0).abs() < 1e-6)));
}

#[test]
fn every_violation_is_listed() {
    let err = validate_model::<f64>(&input("x + 1", "-1", -1.0, 1.0)).unwrap_err();
    let ModelError::Invalid(v) = err else { panic!("{err:?}") };
    assert!(v.iter().any(|e| matches!(e, Violation::DriftNotZero { .. })));
    assert!(v.iter().any(|e| matches!(e, Violation::SigmaNotPositive { .. })));
    let err = validate_model::<f64>(&input("-x", "1", -1.0, 1.0)).unwrap_err();
    let ModelError::Invalid(v) = err else { panic!("{err:?}") };
    assert!(v.iter().any(|e| matches!(e, Violation::NonPositiveLambda { .. })));
}

#[test]
fn supplied_lambda_is_checked() {
    let mut i = input("2*x", "1", -1.0, 1.0);
    i.lambda = Some(2.0);
    assert_eq!(validate_model::<f64>(&i).unwrap().lambda, 2.0);
    i.lambda = Some(2.001);
    assert!(validate_model::<f64>(&i).is_err());
}

#[test]
fn presets_validate() {
    for (name, text) in presets::PRESETS {
        let m: ModelSpec<f64> = validate_model(&ModelInput::from_json(text).unwrap()).unwrap();
        assert!(m.lambda > 0.0, "{name}");
    }
}

#[test]
fn default_neighborhood_of_the_linear_model() {
    let m: ModelSpec<f64> = validate_model(&input("x", "1", -1.0, 1.0)).unwrap();
    let n = choose_neighborhood(&m, &conj(&m), None).unwrap();
    assert_eq!((n.r, n.v_minus, n.v_plus), (0.5, -0.5, 0.5));
    assert!(matches!(
        choose_neighborhood(&m, &conj(&m), Some(2.0)),
        Err(ModelError::RadiusTooLarge { .. })
    ));
    assert!(choose_neighborhood(&m, &conj(&m), Some(-0.1)).is_err());
}

#[test]
fn cubic_neighborhood_matches_the_closed_form_inverse() {
    // b = x + x^3 is conjugated by f(x) = x / sqrt(1 + x^2), so g(y) = y / sqrt(1 - y^2) and |g(y)| > |y|.
    let m: ModelSpec<f64> = validate_model(&input("x + x^3", "1", -0.7, 0.7)).unwrap();
    let n = choose_neighborhood(&m, &conj(&m), Some(0.3)).unwrap();
    let g = 0.3 / (1.0f64 - 0.09).sqrt();
    assert!((n.v_plus - g).abs() < 1e-9);
    assert!((n.v_minus + g).abs() < 1e-9);
    assert!(n.v_plus > 0.3);
}
