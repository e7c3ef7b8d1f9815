mod common;

use approx::assert_relative_eq;
use proptest::prelude::*;

use boundbench_core::activation::Activation;
use boundbench_core::bounds::{
    alpha_max_terms, compute_alpha_max, compute_h_max, compute_q_tilde, grad_lower_bound, grad_upper_bound,
    loss_threshold_log, probe_local_lipschitz, product_norm_bound, smoothness_bound, weight_norm_floor,
};
use boundbench_core::linalg::Matrix;
use boundbench_core::network::{gradient, stack_from_parts, Dataset, LossValue};
use boundbench_core::{
    monitor_transition, summarize, Error, MonitorContext, MonitorTolerances, StepState, TheoryConstants,
    TheoryInputs, Verdict,
};
use common::{random_dataset, random_stack};

#[test]
fn closed_forms_match_direct_evaluation() {
    let j = LossValue::from_value(1e-8);
    let (p, depth, norm) = (16usize, 2usize, 5.0f64);
    let log_inv = 1e8f64.ln();
    let h_max = compute_h_max(j, p, depth, norm).unwrap();
    assert_relative_eq!(h_max, 2f64.powf(-2.0) * log_inv / (24.0 * 4.0 * 25.0), max_relative = 1e-14);

    let h = h_max / 2.0;
    let t = alpha_max_terms(h, j, p, depth, norm);
    assert_relative_eq!(t.smoothness, h / (1024.0 * 9.0 * 16.0 * 1e-8 * norm.powi(11)), max_relative = 1e-14);
    assert_relative_eq!(t.curvature, 2.5 * 25.0 / (2.0 * 2.0 * 2.75f64.powi(2) * 1e-8 * log_inv), max_relative = 1e-14);
    let alpha = compute_alpha_max(h, j, p, depth, norm).unwrap();
    assert_eq!(alpha, t.smoothness.min(t.curvature));

    let q = compute_q_tilde(alpha, j, depth, norm).unwrap();
    assert_relative_eq!(q, 2.0 * 2.75f64.powi(2) * alpha * 1e-8 * log_inv / (2.5 * 25.0), max_relative = 1e-14);

    let loss = LossValue::from_value(1e-3);
    assert_relative_eq!(grad_lower_bound(loss, 3.0, 2), 2.75 * 1e-3 * 1e3f64.ln() / 3.0, max_relative = 1e-14);
    assert_relative_eq!(grad_upper_bound(loss, 3.0, 4, 2), 12f64.sqrt() * 27.0 * 1e-3, max_relative = 1e-14);
    assert_relative_eq!(grad_upper_bound(LossValue::from_value(3.0), 3.0, 4, 2), 12f64.sqrt() * 27.0, max_relative = 1e-14);
    assert_relative_eq!(smoothness_bound(loss, 2.0, 4, 1, 0.5), 256.0 * 2.0 * 2.0 * 256.0 * 1e-3 / 0.5, max_relative = 1e-14);
    assert_eq!(weight_norm_floor(3), 2.0);
    assert_relative_eq!(loss_threshold_log(10, 2), -49.0 * 10f64.ln(), max_relative = 1e-15);
    assert_eq!(product_norm_bound(0.5, 2), 0.5);
    assert_relative_eq!(product_norm_bound(10.0, 1), 50.0, max_relative = 1e-15);
}

#[test]
fn preconditions_are_rejected() {
    let ok = LossValue::from_value(1e-3);
    assert!(matches!(compute_h_max(LossValue::from_value(2.0), 4, 1, 1.0), Err(Error::Precondition(_))));
    assert!(compute_h_max(ok, 0, 1, 1.0).is_err());
    assert!(compute_h_max(ok, 4, 0, 1.0).is_err());
    assert!(compute_h_max(ok, 4, 1, 0.0).is_err());
    let h_max = compute_h_max(ok, 4, 1, 1.0).unwrap();
    assert!(compute_alpha_max(h_max * 1.01, ok, 4, 1, 1.0).is_err());
    assert!(compute_q_tilde(-1.0, ok, 1, 1.0).is_err());
}

proptest! {
    #[test]
    fn step_size_terms_scale_as_documented(log_inv in 1.0..200.0f64, p in 1..64usize, depth in 1..4usize,
                                           norm in 1.0..10.0f64) {
        let j = LossValue { value: (-log_inv).exp(), log_value: -log_inv };
        let h = compute_h_max(j, p, depth, norm).unwrap();
        prop_assert!(h > 0.0 && h <= 1.0);
        let a = alpha_max_terms(h, j, p, depth, norm);
        let b = alpha_max_terms(h / 2.0, j, p, depth, norm);
        prop_assert!((a.smoothness - 2.0 * b.smoothness).abs() <= 1e-14 * a.smoothness);
        prop_assert_eq!(a.curvature, b.curvature);
        let alpha = a.min();
        let q = compute_q_tilde(alpha, j, depth, norm).unwrap();
        // Q̃ evaluated at the curvature term is exactly 1/2.
        let q_curv = compute_q_tilde(a.curvature, j, depth, norm).unwrap();
        prop_assert!((q_curv - 0.5).abs() <= 1e-12);
        prop_assert!(q <= 0.5 * (1.0 + 1e-12));
    }

    #[test]
    fn product_bound_dominates_subset_products(norm in 0.01..20.0f64, depth in 1..5usize) {
        let k = depth + 1;
        // Balanced layers with operator norm `norm/√k` each maximize the product.
        let per = norm / (k as f64).sqrt();
        let bound = product_norm_bound(norm, depth);
        for size in 1..=k {
            prop_assert!(per.powi(size as i32) <= bound * (1.0 + 1e-12));
        }
    }
}

fn small_context(j1: f64, p: usize, depth: usize, norm: f64, n: usize) -> MonitorContext {
    let inputs = TheoryInputs {
        j1: LossValue::from_value(j1),
        p,
        depth,
        norm_v1: norm,
        n,
    };
    let h_max = compute_h_max(inputs.j1, p, depth, norm).unwrap();
    let alpha = compute_alpha_max(h_max, inputs.j1, p, depth, norm).unwrap();
    let c = TheoryConstants::evaluate(inputs, h_max, alpha).unwrap();
    MonitorContext::from_constants(c, None, MonitorTolerances::default())
}

#[test]
fn monitor_flags_rate_and_descent_violations() {
    let ctx = small_context(1e-12, 4, 1, 3.0, 2);
    let good = StepState {
        t: 1,
        loss: LossValue::from_value(1e-12),
        grad_norm: 1e-12,
        weight_norm: 3.0,
        neg_grad_dot_weights: 1e-12,
    };
    let worse = StepState { t: 2, loss: LossValue::from_value(2e-12), ..good };
    assert!(ctx.theory.unwrap().in_regime());
    let r = monitor_transition(&good, Some(&worse), &ctx);
    assert_eq!(r.descent.verdict, Verdict::Fail);
    assert_eq!(r.i1.verdict, Verdict::Pass);
    let r2 = monitor_transition(&worse, None, &ctx);
    assert_eq!(r2.i1.verdict, Verdict::Fail);
    assert_eq!(r2.descent.verdict, Verdict::NotApplicable);
    let summary = summarize(&[r.clone(), r2.clone()]);
    let i1 = summary.iter().find(|v| v.name == "i1").unwrap();
    assert_eq!((i1.applicable, i1.violations, i1.first_violation), (2, 1, Some(r2.step)));
    assert_eq!(i1.verdict(), Verdict::Fail);
}

#[test]
fn monitor_without_theory_reports_not_applicable() {
    let mut ctx = small_context(1e-6, 4, 1, 3.0, 2);
    ctx.theory = None;
    let state = StepState {
        t: 3,
        loss: LossValue::from_value(0.5),
        grad_norm: 0.1,
        weight_norm: 2.0,
        neg_grad_dot_weights: 0.05,
    };
    let r = monitor_transition(&state, None, &ctx);
    assert!(r.rate_bound.is_nan());
    assert_eq!(r.i1.verdict, Verdict::NotApplicable);
    assert_eq!(r.i2.verdict, Verdict::NotApplicable);
    let s = summarize(&[r]);
    assert_eq!(s.iter().find(|v| v.name == "i1").unwrap().verdict(), Verdict::NotApplicable);
}

#[test]
fn lipschitz_probe_matches_hessian_in_one_dimension() {
    // p = 1, L = 1: J(a, b) = ℓ(y b φ(a x)); estimate the Hessian by differences.
    let hidden = Matrix::from_vec(1, 1, vec![0.7]).unwrap();
    let v = stack_from_parts(vec![hidden], vec![1.3]).unwrap();
    let data = Dataset::new(1, vec![vec![1.0]], vec![1.0]).unwrap();
    let act = Activation::swish(0.5).unwrap();
    let eps = 1e-5;
    let mut hess = [[0.0; 2]; 2];
    for k in 0..2 {
        let idx = v.param_index(k);
        let mut plus = v.clone();
        plus.set_param(idx, v.get_param(idx) + eps);
        let mut minus = v.clone();
        minus.set_param(idx, v.get_param(idx) - eps);
        let gp = gradient(&plus, &act, &data).unwrap().to_flat();
        let gm = gradient(&minus, &act, &data).unwrap().to_flat();
        for i in 0..2 {
            hess[i][k] = (gp[i] - gm[i]) / (2.0 * eps);
        }
    }
    let m = nalgebra::Matrix2::new(hess[0][0], hess[0][1], hess[1][0], hess[1][1]);
    let op = m.singular_values().max();
    let probe = probe_local_lipschitz(&v, &act, &data, 1e-3, 200, 7).unwrap();
    assert!((probe - op).abs() <= 0.1 * op, "probe {probe} vs hessian {op}");
    assert!(probe <= op * 1.01);
}

#[test]
fn lipschitz_probe_rejects_degenerate_input() {
    let v = random_stack(2, 1, 3);
    let data = random_dataset(2, 2, 3);
    let act = Activation::huberized(0.5).unwrap();
    assert!(matches!(probe_local_lipschitz(&v, &act, &data, 1e-300, 4, 1), Err(Error::DuplicateProbe)));
    assert!(probe_local_lipschitz(&v, &act, &data, 0.0, 4, 1).is_err());
    assert!(probe_local_lipschitz(&v, &act, &data, 1.0, 1, 1).is_err());
}
