use astro_float::{BigFloat, Consts, RoundingMode};
use proptest::prelude::*;

use boundbench_core::activation::{certify_h_smooth, Activation, ActivationKind, GridSpec};

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

fn big(x: f64) -> BigFloat {
    BigFloat::from_f64(x, PREC)
}

fn to_f64(x: &BigFloat) -> f64 {
    x.to_string().parse().expect("decimal output parses")
}

/// `z / (1.1 (1 + exp(-2z/h)))` in 256-bit arithmetic.
fn swish_reference(z: f64, h: f64) -> f64 {
    let mut cc = Consts::new().expect("constants");
    let a = big(-2.0).mul(&big(z), PREC, RM).div(&big(h), PREC, RM);
    let denom = big(1.0).add(&a.exp(PREC, RM, &mut cc), PREC, RM);
    let scaled = big(1.1).mul(&denom, PREC, RM);
    to_f64(&big(z).div(&scaled, PREC, RM))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn swish_matches_high_precision_reference() {
    let act = Activation::swish(1.0).unwrap();
    let expected = swish_reference(1.0, 1.0);
    assert!(rel_err(act.value(1.0), expected) <= 4e-16, "{} vs {expected}", act.value(1.0));
    for (z, h) in [(-3.0, 0.5), (0.01, 0.1), (7.5, 2.0), (-0.2, 0.01), (40.0, 1.0)] {
        let a = Activation::swish(h).unwrap();
        let expected = swish_reference(z, h);
        // Rounding of the exponent argument propagates as roughly |2z/h| ulps.
        let tol = 2.2e-16 * (2.0 + (2.0 * z / h).abs());
        assert!(rel_err(a.value(z), expected) <= tol, "z={z} h={h}: {} vs {expected}", a.value(z));
    }
}

#[test]
fn huberized_piecewise_values() {
    let act = Activation::huberized(0.5).unwrap();
    assert_eq!(act.value(-1.0), 0.0);
    assert_eq!(act.value(0.0), 0.0);
    assert_eq!(act.value(0.25), 0.0625);
    assert_eq!(act.value(0.5), 0.25);
    assert_eq!(act.value(2.0), 1.75);
    assert_eq!(act.deriv(-1.0), 0.0);
    assert_eq!(act.deriv(0.25), 0.5);
    assert_eq!(act.deriv(3.0), 1.0);
    assert_eq!(act.kinks(), vec![0.0, 0.5]);
}

#[test]
fn swish_saturates_without_overflow() {
    let act = Activation::swish(1e-3).unwrap();
    for z in [-1e6, -1.0, 1.0, 1e6] {
        assert!(act.value(z).is_finite());
        assert!(act.deriv(z).is_finite());
    }
    assert_eq!(act.value(-1.0), 0.0);
    assert_eq!(act.value(1e6), 1e6 / 1.1);
    assert_eq!(act.deriv(1e6), 1.0 / 1.1);
}

#[test]
fn invalid_widths_rejected() {
    for h in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(Activation::huberized(h).is_err());
        assert!(Activation::swish(h).is_err());
    }
}

#[test]
fn kinds_parse_by_name() {
    assert_eq!("huberized".parse::<ActivationKind>().unwrap(), ActivationKind::Huberized);
    assert_eq!("swish".parse::<ActivationKind>().unwrap(), ActivationKind::Swish);
    assert!("relu".parse::<ActivationKind>().is_err());
    assert_eq!(ActivationKind::Swish.to_string(), "swish");
}

#[test]
fn certificate_passes_for_both_kinds() {
    for kind in [ActivationKind::Huberized, ActivationKind::Swish] {
        for h in [0.01, 0.1, 1.0, 5.0] {
            let r = certify_h_smooth(&Activation::new(kind, h).unwrap(), &GridSpec::default()).unwrap();
            assert!(r.pass, "{kind} h={h}: {r:?}");
            assert!(r.differentiable, "{kind} h={h}: {r:?}");
            assert!(r.samples_used >= 10_000);
        }
    }
}

fn kind_strategy() -> impl Strategy<Value = ActivationKind> {
    prop_oneof![Just(ActivationKind::Huberized), Just(ActivationKind::Swish)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn smoothness_conditions_hold_pointwise(kind in kind_strategy(), h in 1e-3..10.0f64, t in -50.0..50.0f64, s in -50.0..50.0f64) {
        let act = Activation::new(kind, h).unwrap();
        let (z, w) = (t * h, s * h);
        prop_assert!(act.deriv(z).abs() <= 1.0 + 1e-12);
        prop_assert!((act.deriv(z) * z - act.value(z)).abs() <= h / 2.0 + 1e-12 * (1.0 + z.abs()));
        if z != w {
            prop_assert!((act.deriv(z) - act.deriv(w)).abs() <= (z - w).abs() / h * (1.0 + 1e-9) + 1e-12);
        }
        prop_assert!((act.value(z) - act.value(w)).abs() <= (z - w).abs() * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn contractive_on_vectors(kind in kind_strategy(), h in 1e-2..2.0f64,
                              a in prop::collection::vec(-5.0..5.0f64, 1..12), shift in -1.0..1.0f64) {
        let act = Activation::new(kind, h).unwrap();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * (i as f64).sin()).collect();
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dist(&act.apply(&a), &act.apply(&b)) <= dist(&a, &b) + 1e-12);
    }

    #[test]
    fn derivative_matches_central_difference(kind in kind_strategy(), h in 0.05..2.0f64, t in -8.0..8.0f64) {
        let act = Activation::new(kind, h).unwrap();
        let z = t * h;
        let d = 1e-7 * h;
        let fd = (act.value(z + d) - act.value(z - d)) / (2.0 * d);
        // Lipschitz truncation d/(2h) plus rounding.
        prop_assert!((fd - act.deriv(z)).abs() <= d / (2.0 * h) + 1e-7);
    }
}
