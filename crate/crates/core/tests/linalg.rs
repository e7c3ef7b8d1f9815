use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;

use boundbench_core::linalg::{dot, operator_norm, vec_norm, Matrix, WeightStack, OP_NORM_MAX_ITERS, OP_NORM_REL_TOL};
use boundbench_core::oracles::naive_frobenius;

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn svd_norm(m: &Matrix) -> f64 {
    to_dmatrix(m).singular_values().max()
}

fn matrix_strategy(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0..3.0f64, r * c).prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
    })
}

fn stack_strategy() -> impl Strategy<Value = WeightStack> {
    (1..=5usize, 1..=3usize).prop_flat_map(|(p, depth)| {
        prop::collection::vec(-2.0..2.0f64, depth * p * p + p)
            .prop_map(move |flat| WeightStack::from_flat(p, depth, &flat).unwrap())
    })
}

#[test]
fn operator_norm_matches_svd_on_fixed_cases() {
    let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![4.0, 5.0]]).unwrap();
    let est = operator_norm(&m, OP_NORM_REL_TOL, OP_NORM_MAX_ITERS).unwrap();
    assert!(est.converged);
    assert_relative_eq!(est.value, svd_norm(&m), max_relative = 1e-9);
    assert_relative_eq!(est.value, 45f64.sqrt(), max_relative = 1e-9);

    let diag = Matrix::from_diag(&[1.0, -7.0, 2.0]);
    assert_relative_eq!(operator_norm(&diag, 1e-12, 1000).unwrap().value, 7.0, max_relative = 1e-10);
}

#[test]
fn operator_norm_of_zero_and_vectors() {
    assert_eq!(operator_norm(&Matrix::zeros(3, 4), 1e-10, 100).unwrap().value, 0.0);
    let row = Matrix::from_vec(1, 3, vec![1.0, 2.0, 2.0]).unwrap();
    assert_eq!(operator_norm(&row, 1e-10, 100).unwrap().value, 3.0);
}

#[test]
fn matvec_and_transpose_agree_with_nalgebra() {
    let m = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, -1.0]]).unwrap();
    let v = [0.3, -0.7, 2.0];
    let w = [1.5, -0.25];
    let dm = to_dmatrix(&m);
    let mv = dm.clone() * nalgebra::DVector::from_column_slice(&v);
    let mtw = dm.transpose() * nalgebra::DVector::from_column_slice(&w);
    assert_eq!(m.matvec(&v).unwrap(), mv.as_slice());
    for (a, b) in m.matvec_t(&w).unwrap().iter().zip(mtw.iter()) {
        assert_relative_eq!(*a, *b, max_relative = 1e-15);
    }
    assert!(m.matvec(&w).is_err());
    assert!(m.matvec_t(&v).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_norm_agrees_with_svd(m in matrix_strategy(8)) {
        let exact = svd_norm(&m);
        let est = operator_norm(&m, 1e-12, 100_000).unwrap();
        prop_assert!(est.value <= exact * (1.0 + 1e-12) + 1e-300);
        prop_assert!((est.value - exact).abs() <= 1e-5 * exact.max(1e-12));
    }

    #[test]
    fn operator_norm_sits_between_row_and_frobenius(m in matrix_strategy(6)) {
        let op = operator_norm(&m, 1e-12, 100_000).unwrap().value;
        let max_row = (0..m.rows()).map(|r| vec_norm(m.row(r))).fold(0.0, f64::max);
        prop_assert!(op <= m.frobenius_norm() * (1.0 + 1e-12));
        prop_assert!(op >= max_row * (1.0 - 1e-6));
    }

    #[test]
    fn flat_round_trip(v in stack_strategy()) {
        let flat = v.to_flat();
        prop_assert_eq!(flat.len(), v.num_params());
        let back = WeightStack::from_flat(v.width(), v.depth(), &flat).unwrap();
        prop_assert_eq!(&back, &v);
        for (k, x) in flat.iter().enumerate() {
            prop_assert_eq!(v.get_param(v.param_index(k)), *x);
        }
    }

    #[test]
    fn frobenius_matches_naive(v in stack_strategy()) {
        let fast = v.frobenius_norm();
        let slow = naive_frobenius(&v);
        prop_assert!((fast - slow).abs() <= 1e-14 * slow.max(1e-300));
        let layers = v.per_layer_frobenius();
        let combined = layers.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((combined - fast).abs() <= 1e-14 * fast.max(1e-300));
    }

    #[test]
    fn inner_product_is_bilinear(a in stack_strategy(), alpha in -3.0..3.0f64) {
        let b = a.scaled(0.5);
        let c = a.axpy(alpha, &b).unwrap();
        let lhs = c.dot(&a).unwrap();
        let rhs = a.dot(&a).unwrap() + alpha * b.dot(&a).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        prop_assert!((a.dot(&a).unwrap() - a.frobenius_norm().powi(2)).abs() <= 1e-12 * (1.0 + lhs.abs()));
        prop_assert_eq!(a.sub(&a).unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn dot_matches_sequential_sum(a in prop::collection::vec(-5.0..5.0f64, 0..40)) {
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let seq: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        prop_assert!((dot(&a, &b) - seq).abs() <= 1e-12 * (1.0 + seq.abs()));
    }
}

#[test]
fn layer_distance_is_per_layer_maximum() {
    let a = WeightStack::zeros(2, 2);
    let mut b = a.clone();
    b.layer_mut(1).set(0, 0, 3.0);
    b.layer_mut(1).set(1, 1, 4.0);
    b.outer_mut().set(0, 1, 2.0);
    assert_eq!(a.max_layer_distance(&b).unwrap(), 5.0);
    assert!(a.max_layer_distance(&WeightStack::zeros(3, 2)).is_err());
}

#[test]
fn stack_norms_report_operator_norms() {
    let hidden = vec![Matrix::from_diag(&[2.0, 1.0])];
    let outer = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
    let v = WeightStack::new(hidden, outer).unwrap();
    let norms = v.norms().unwrap();
    assert_relative_eq!(norms.per_layer_operator[0], 2.0, max_relative = 1e-9);
    assert_eq!(norms.per_layer_operator[1], 5.0);
    assert_relative_eq!(norms.frobenius, 30f64.sqrt(), max_relative = 1e-15);
}
