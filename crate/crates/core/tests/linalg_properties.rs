mod common;

use msll_core::linalg::{constrained_lstsq, expm, lstsq, LinalgError};
use msll_core::{Matrix, Vector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn vector(n: usize, scale: f64) -> impl Strategy<Value = Vector> {
    prop::collection::vec(-scale..scale, n).prop_map(Vector::from_vec)
}

/// Square matrix with Frobenius norm at most `bound`.
fn bounded_square(bound: f64) -> impl Strategy<Value = Matrix> {
    (1usize..=6).prop_flat_map(move |n| {
        matrix(n, n, 1.0).prop_map(move |a| {
            let norm = a.norm();
            if norm > bound {
                a * (bound / norm)
            } else {
                a
            }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn expm_inverse_is_expm_of_negation(a in bounded_square(5.0)) {
        let n = a.nrows();
        let prod = expm(&a).unwrap() * expm(&(-&a)).unwrap();
        let err = (prod - Matrix::identity(n, n)).amax();
        prop_assert!(err <= 1e-10, "error {err:e}");
    }

    #[test]
    fn expm_turns_commuting_sums_into_products(
        a in bounded_square(1.5),
        c in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let n = a.nrows();
        let b = Matrix::identity(n, n) * c[0] + &a * c[1] + &a * &a * c[2];
        let lhs = expm(&(&a + &b)).unwrap();
        let rhs = expm(&a).unwrap() * expm(&b).unwrap();
        let err = (&lhs - &rhs).amax() / lhs.amax().max(1.0);
        prop_assert!(err <= 1e-10, "error {err:e}");
    }

    #[test]
    fn expm_agrees_with_taylor_oracle(a in bounded_square(3.0)) {
        let e = expm(&a).unwrap();
        let oracle = common::taylor_expm(&a);
        let err = (&e - &oracle).amax() / oracle.amax();
        prop_assert!(err <= 1e-12, "error {err:e}");
    }

    #[test]
    fn lstsq_residual_is_orthogonal_to_columns(
        (x, y) in (1usize..=5).prop_flat_map(|n| (n..=12).prop_flat_map(move |m| (matrix(m, n, 1.0), vector(m, 1.0))))
    ) {
        match lstsq(&x, &y) {
            Ok(beta) => {
                let g = x.transpose() * (&x * &beta - &y);
                prop_assert!(g.amax() <= 1e-8, "gradient {:e}", g.amax());
            }
            Err(LinalgError::RankDeficient { .. }) => {
                let s = x.clone().svd(false, false).singular_values;
                prop_assert!(s.min() < 1e-8 * s.max());
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn constrained_lstsq_is_feasible_and_stationary(
        (x, y, a, b) in (2usize..=5).prop_flat_map(|n| (1..n, n..=10).prop_flat_map(move |(k, m)| {
            (matrix(m, n, 1.0), vector(m, 1.0), matrix(k, n, 1.0), vector(k, 1.0))
        }))
    ) {
        let beta = constrained_lstsq(&x, &y, &a, &b).unwrap();
        let feas = (&a * &beta - &b).amax();
        prop_assert!(feas <= 1e-10, "feasibility {feas:e}");
        // Xᵀ(Xβ − y) must lie in the row space of A: its projection onto
        // the null space of A vanishes.
        let grad = x.transpose() * (&x * &beta - &y);
        let svd = a.clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        let in_rows = vt.transpose() * (&vt * &grad);
        let off = (&grad - in_rows).amax();
        prop_assert!(off <= 1e-8, "stationarity {off:e}");
    }
}

#[test]
fn constrained_lstsq_matches_generalized_inverse_formula() {
    let mut rng = common::rng(31);
    for _ in 0..20 {
        let x = common::random_matrix(&mut rng, 8, 3, 1.0);
        let y = common::random_vector(&mut rng, 8, 1.0);
        let a = common::random_matrix(&mut rng, 1, 3, 1.0);
        let b = common::random_vector(&mut rng, 1, 1.0);
        let mut kkt = Matrix::zeros(4, 4);
        kkt.view_mut((0, 0), (3, 3)).copy_from(&(x.transpose() * &x));
        kkt.view_mut((0, 3), (3, 1)).copy_from(&a.transpose());
        kkt.view_mut((3, 0), (1, 3)).copy_from(&a);
        let inv = kkt.try_inverse().unwrap();
        let mut rhs = Vector::zeros(4);
        rhs.rows_mut(0, 3).copy_from(&(x.transpose() * &y));
        rhs.rows_mut(3, 1).copy_from(&b);
        let oracle = (inv * rhs).rows(0, 3).clone_owned();
        let beta = constrained_lstsq(&x, &y, &a, &b).unwrap();
        assert!((beta - oracle).amax() <= 1e-8);
    }
}

#[test]
fn rank_deficiency_reports_the_numerical_rank() {
    let x = Matrix::from_row_slice(4, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
    let y = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
    match lstsq(&x, &y) {
        Err(LinalgError::RankDeficient { rank, cols, .. }) => {
            assert_eq!((rank, cols), (2, 3));
        }
        other => panic!("expected rank deficiency, got {other:?}"),
    }
}

#[test]
fn badly_scaled_full_rank_columns_are_solved() {
    // Columns differ in scale by 1e12 but are independent.
    let mut rng = common::rng(32);
    let mut x = common::random_matrix(&mut rng, 10, 3, 1.0);
    x.column_mut(0).scale_mut(1e8);
    x.column_mut(2).scale_mut(1e-4);
    let truth = Vector::from_vec(vec![1e-8, 2.0, -3e4]);
    let y = &x * &truth;
    let beta = lstsq(&x, &y).unwrap();
    for i in 0..3 {
        assert!(((beta[i] - truth[i]) / truth[i]).abs() < 1e-8);
    }
}
