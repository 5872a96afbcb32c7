use nalgebra::DVector;
use proptest::prelude::*;
use srmcp::distance::distance;
use srmcp::endpoint::cauchy_schwarz_gap;
use srmcp::hamiltonian::{exp_jacobian, exp_map, extremal_flow};
use srmcp::{Algebra, Frame, Model, Rational, ShootingOptions};

fn point(dim: usize, scale: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-scale..scale, dim).prop_map(DVector::from_vec)
}

fn close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + a.norm().max(b.norm()))
}

const MODELS: [&str; 4] = [
    "heisenberg1",
    "heisenberg2",
    "engel",
    "h_type(quaternionic,1)",
];

fn model_and_points(count: usize) -> impl Strategy<Value = (Model, Vec<DVector<f64>>)> {
    (0..MODELS.len()).prop_flat_map(move |k| {
        let model = Model::builtin(MODELS[k]).unwrap();
        let dim = model.dim();
        (Just(model), prop::collection::vec(point(dim, 2.0), count))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn group_law_is_associative((m, pts) in model_and_points(3)) {
        let (a, b, c) = (&pts[0], &pts[1], &pts[2]);
        let left = m.product(&m.product(a, b), c);
        let right = m.product(a, &m.product(b, c));
        prop_assert!(close(&left, &right, 1e-12), "{left} vs {right}");
    }

    #[test]
    fn inverse_and_identity((m, pts) in model_and_points(1)) {
        let a = &pts[0];
        let zero = DVector::zeros(m.dim());
        prop_assert!(close(&m.product(a, &m.inverse(a)), &zero, 1e-12));
        prop_assert!(close(&m.product(&zero, a), a, 1e-14));
    }

    #[test]
    fn dilations_are_automorphisms((m, pts) in model_and_points(2), lambda in 0.2f64..3.0) {
        let (a, b) = (&pts[0], &pts[1]);
        let left = m.dilate(lambda, &m.product(a, b)).unwrap();
        let right = m.product(&m.dilate(lambda, a).unwrap(), &m.dilate(lambda, b).unwrap());
        prop_assert!(close(&left, &right, 1e-11));
    }

    #[test]
    fn frame_is_left_invariant((m, pts) in model_and_points(2)) {
        let (a, b) = (&pts[0], &pts[1]);
        // d(L_a)_b X(b) = X(a·b), with d(L_a)_b by central differences
        let h = 1e-6;
        let xb = m.frame_at(b);
        let xab = m.frame_at(&m.product(a, b));
        for i in 0..m.rank() {
            let dir = xb.column(i).into_owned();
            let pushed = (m.product(a, &(b + &dir * h)) - m.product(a, &(b - &dir * h))) / (2.0 * h);
            prop_assert!(close(&pushed, &xab.column(i).into_owned(), 1e-7));
        }
    }
}

fn two_step_algebra() -> impl Strategy<Value = Algebra> {
    (2usize..=4, 1usize..=3)
        .prop_filter("second layer fits", |(r, m)| *m <= r * (r - 1) / 2)
        .prop_flat_map(|(r, m)| {
            let pairs = r * (r - 1) / 2;
            (
                Just(r),
                Just(m),
                prop::collection::vec(-2i64..=2, pairs * m),
            )
        })
        .prop_map(|(r, m, coeffs)| {
            let mut weights = vec![1; r];
            weights.extend(std::iter::repeat_n(2, m));
            let mut brackets = Vec::new();
            let mut c = coeffs.into_iter();
            for i in 0..r {
                for j in i + 1..r {
                    for k in 0..m {
                        brackets.push((i, j, r + k, Rational::from_integer(c.next().unwrap())));
                    }
                }
            }
            Algebra::new("random", r, weights, brackets).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_step_algebras_are_medium_fat(alg in two_step_algebra()) {
        // coefficient choices that do not generate the second layer are not Carnot
        prop_assume!(alg.validate().is_ok());
        prop_assert!(alg.is_two_step());
        let check = alg.medium_fat_check(32, 1);
        prop_assert!(check.holds(), "{check:?}");
    }
}

fn model_and_covector() -> impl Strategy<Value = (Model, DVector<f64>)> {
    (0..3usize).prop_flat_map(|k| {
        let model = Model::builtin(["heisenberg1", "heisenberg2", "engel"][k]).unwrap();
        let dim = model.dim();
        (Just(model), point(dim, 1.5))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn time_and_covector_scale_together((m, p) in model_and_covector(), c in 0.3f64..2.0) {
        let x = DVector::zeros(m.dim());
        let arc = extremal_flow(&m, &x, &p, c, 1e-12).unwrap();
        let scaled = exp_map(&m, &x, &(&p * c)).unwrap();
        prop_assert!(close(&arc.endpoint, &scaled, 1e-8), "{} vs {scaled}", arc.endpoint);
    }

    #[test]
    fn hamiltonian_is_conserved((m, p) in model_and_covector()) {
        let x = DVector::zeros(m.dim());
        let arc = extremal_flow(&m, &x, &p, 1.0, 1e-11).unwrap();
        prop_assert!(arc.max_drift <= 1e-8 * (1.0 + arc.energy), "drift {}", arc.max_drift);
    }

    #[test]
    fn exp_jacobian_matches_differences((m, p) in model_and_covector()) {
        let x = DVector::zeros(m.dim());
        let jac = exp_jacobian(&m, &x, &p, 1e-12).unwrap();
        let h = 1e-5;
        for j in 0..m.dim() {
            let mut e = DVector::zeros(m.dim());
            e[j] = h;
            let fd = (exp_map(&m, &x, &(&p + &e)).unwrap() - exp_map(&m, &x, &(&p - &e)).unwrap()) / (2.0 * h);
            let col = jac.dx_dp.column(j).into_owned();
            prop_assert!((&fd - &col).norm() <= 1e-6 * (1.0 + col.norm()), "column {j}: {fd} vs {col}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn distance_is_symmetric_and_homogeneous(y in point(3, 1.0), lambda in 0.5f64..2.0) {
        prop_assume!(y.rows(0, 2).norm() > 0.1);
        let m = Model::builtin("heisenberg1").unwrap();
        let opts = ShootingOptions::default();
        let zero = DVector::zeros(3);
        let d = distance(&m, &zero, &y, &opts).unwrap().value;
        let back = distance(&m, &m.inverse(&y), &zero, &opts).unwrap().value;
        let scaled = distance(&m, &zero, &m.dilate(lambda, &y).unwrap(), &opts).unwrap().value;
        prop_assert!((d - back).abs() <= 1e-7 * (1.0 + d));
        prop_assert!((scaled - lambda * d).abs() <= 1e-7 * (1.0 + scaled));
    }

    #[test]
    fn gap_ratio_lies_in_unit_interval(samples in prop::collection::vec(-3.0f64..3.0, 1..20), tau in 0.1f64..5.0) {
        let odd = if samples.len() % 2 == 0 { &samples[1..] } else { &samples[..] };
        prop_assume!(odd.len() >= 3);
        if let Ok(g) = cauchy_schwarz_gap(odd, tau) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&g.nu), "nu {}", g.nu);
        }
    }
}

#[test]
fn frame_accessors_agree() {
    let m = Model::builtin("engel").unwrap();
    let x = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
    assert_eq!(m.frame_at(&x), Frame::frame(&m, &x));
    let full = m.left_translation_differential(&x);
    assert_eq!(full.columns(0, 2), m.frame_at(&x));
}
