use koopsos::koopman::{collect, edmd_fit, Dictionary};
use koopsos::poly::{kron, monomial_basis, Polynomial};
use koopsos::region::Region;
use koopsos::sim::{DiscreteSystem, System};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn poly(n: usize, degree: u32) -> impl Strategy<Value = Polynomial> {
    let basis = monomial_basis(n, degree);
    prop::collection::vec(-1.0..1.0f64, basis.len()).prop_map(move |coeffs| {
        let mut p = Polynomial::zero(n);
        for (m, c) in basis.iter().zip(coeffs) {
            p.add_term(m.clone(), c);
        }
        p
    })
}

fn three_polys() -> impl Strategy<Value = (Polynomial, Polynomial, Polynomial, Vec<f64>)> {
    (1usize..=3).prop_flat_map(|n| {
        (
            poly(n, 3),
            poly(n, 3),
            poly(n, 2),
            prop::collection::vec(-1.5..1.5f64, n),
        )
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ring_axioms((a, b, c, _) in three_polys()) {
        prop_assert!((&(&a + &b) + &c).max_abs_diff(&(&a + &(&b + &c))) <= 1e-12);
        prop_assert!((&a * &(&b + &c)).max_abs_diff(&(&(&a * &b) + &(&a * &c))) <= 1e-12);
        prop_assert!((&a * &b).max_abs_diff(&(&b * &a)) <= 1e-12);
        prop_assert!((&(&a * &b) * &c).max_abs_diff(&(&a * &(&b * &c))) <= 1e-12);
        prop_assert!((&a - &a).is_zero());
    }

    #[test]
    fn evaluation_is_a_ring_homomorphism((a, b, _, x) in three_polys()) {
        let (ea, eb) = (a.eval(&x).unwrap(), b.eval(&x).unwrap());
        let prod = (&a * &b).eval(&x).unwrap();
        prop_assert!((prod - ea * eb).abs() <= 1e-10 * (ea * eb).abs().max(1.0));
        let sum = (&a + &b).eval(&x).unwrap();
        prop_assert!((sum - (ea + eb)).abs() <= 1e-10 * (ea + eb).abs().max(1.0));
    }

    #[test]
    fn kron_mixed_product(
        (a, b, c, d) in (1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..4)
            .prop_flat_map(|(r1, c1, r2, c2, c3, c4)| (matrix(r1, c1), matrix(r2, c2), matrix(c1, c3), matrix(c2, c4)))
    ) {
        let lhs = kron(&a, &b) * kron(&c, &d);
        let rhs = kron(&(&a * &c), &(&b * &d));
        prop_assert!((lhs - rhs).amax() <= 1e-12);
    }

    #[test]
    fn edmd_recovers_bilinear_maps(
        (a, b0, bt) in (1usize..=3, 1usize..=2)
            .prop_flat_map(|(n, m)| (matrix(n, n), matrix(n, m), matrix(n, n * m)))
    ) {
        let (n, m) = (a.nrows(), b0.ncols());
        let (a2, b02, bt2) = (a.clone(), b0.clone(), bt.clone());
        let sys = System::Discrete(DiscreteSystem::new(n, m, "bilinear", std::sync::Arc::new(move |x: &[f64], u: &[f64]| {
            let x = DVector::from_column_slice(x);
            let mut next = &a2 * &x + &b02 * DVector::from_column_slice(u);
            for (i, ui) in u.iter().enumerate() {
                next += bt2.columns(i * n, n) * &x * *ui;
            }
            next
        })));
        let ds = collect(&sys, &Region::symmetric(n, 1.0).unwrap(), 20, 1.0, 11, 1).unwrap();
        let fit = edmd_fit(&ds, &Dictionary::identity(n)).unwrap();
        let err = (&fit.a - &a).norm().max((&fit.b0 - &b0).norm()).max((&fit.btilde - &bt).norm());
        prop_assert!(err <= 1e-8, "error {}", err);
    }
}
