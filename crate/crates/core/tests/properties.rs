use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sqfam::estimation::{grad_nll, nll_augmented, FamilySpec};
use sqfam::features::FeatureMap;
use sqfam::geometry::{bregman_divergence, divergence_chain_slacks, fisher_augmented, fisher_squared, sq_l2};
use sqfam::gfamily::{z_quadrature, GSpec};
use sqfam::kernel::compute_kernel;
use sqfam::measure::{BaseMeasure, IntegrationScheme};
use sqfam::model::{canonicalize, cholesky_flatten, cholesky_unflatten, Parameter, ParameterSpaceSpec, SquaredFamilyModel};
use sqfam::sampling::inverse_cdf_transform;

fn theta_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-2))
}

fn poly_family(deg: usize) -> FamilySpec {
    FamilySpec::new(FeatureMap::polynomial(1, deg).unwrap(), BaseMeasure::unit_box(1), &IntegrationScheme::default())
        .unwrap()
}

fn model(fam: &FamilySpec, theta: &[f64]) -> SquaredFamilyModel {
    fam.model(&DVector::from_column_slice(theta)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normaliser_factorises(theta in theta_strategy(4)) {
        let fam = poly_family(3);
        let t = DVector::from_column_slice(&theta);
        let z = fam.kernel.quadratic_form(&theta);
        let direct = z_quadrature(&GSpec::Monomial { k: 2 }, &fam.features, &fam.measure, &t, &IntegrationScheme::quadrature(40)).unwrap();
        prop_assert!((z - direct.value).abs() <= 1e-10 * z.max(1.0));
    }

    #[test]
    fn density_is_scale_invariant(theta in theta_strategy(3), c in 0.1..10.0f64, x in 0.0..1.0f64) {
        let fam = poly_family(2);
        let scaled: Vec<f64> = theta.iter().map(|v| -c * v).collect();
        let a = model(&fam, &theta).density(&[x]).unwrap();
        let b = model(&fam, &scaled).density(&[x]).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn bregman_is_twice_l2(a in theta_strategy(3), b in theta_strategy(3)) {
        let fam = poly_family(2);
        let (ta, tb) = (DVector::from_column_slice(&a), DVector::from_column_slice(&b));
        let d = bregman_divergence(fam.k(), &ta, &tb).unwrap();
        let map = fam.features.clone();
        let map2 = fam.features.clone();
        let l2 = sq_l2(
            move |x| Ok(map.eval_features(x)?.dot(&ta)),
            move |x| Ok(map2.eval_features(x)?.dot(&tb)),
            &fam.measure,
            &IntegrationScheme::default(),
        ).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - 2.0 * l2).abs() <= 1e-10 * d.max(1.0));
    }

    #[test]
    fn fisher_null_direction(theta in theta_strategy(3)) {
        let fam = poly_family(2);
        let m = model(&fam, &theta);
        let g = fisher_squared(&m).unwrap();
        let t = DVector::from_column_slice(&theta);
        prop_assert!((&g.matrix * &t).norm() <= 1e-10 * g.norm2() * t.norm().max(1.0));
        prop_assert!(g.min_eigenvalue() >= -1e-10 * g.norm2());
        prop_assert!(fisher_augmented(&m, 1.0).unwrap().min_eigenvalue() > 0.0);
    }

    #[test]
    fn canonicalize_is_idempotent(theta in theta_strategy(3)) {
        let fam = poly_family(2);
        let c = canonicalize(&DVector::from_column_slice(&theta), &fam.kernel).unwrap();
        prop_assert!((fam.kernel.quadratic_form(c.as_slice()) - 1.0).abs() < 1e-12);
        let again = canonicalize(&c, &fam.kernel).unwrap();
        prop_assert!((&again - &c).amax() < 1e-12);
    }

    #[test]
    fn projection_is_feasible(theta in theta_strategy(3), normalized in any::<bool>()) {
        let fam = poly_family(2);
        let space = ParameterSpaceSpec::new(1e-3, 10.0, normalized).unwrap();
        let mut t = DVector::from_column_slice(&theta) * 5.0;
        space.project(&mut t, fam.k());
        prop_assert!(space.contains(&t, fam.k(), 1e-9));
    }

    #[test]
    fn cholesky_round_trip(diag in prop::collection::vec(0.1..3.0f64, 3), off in prop::collection::vec(-2.0..2.0f64, 3)) {
        let l = DMatrix::from_row_slice(3, 3, &[diag[0], 0.0, 0.0, off[0], diag[1], 0.0, off[1], off[2], diag[2]]);
        let v = cholesky_flatten(&l).unwrap();
        prop_assert_eq!(cholesky_unflatten(&v, 3).unwrap(), l);
    }

    #[test]
    fn divergence_chain_holds(a in theta_strategy(3), b in theta_strategy(3)) {
        let fam = poly_family(2);
        let rule = fam.measure.cubature(&IntegrationScheme::quadrature(128)).unwrap();
        let tab = |t: &[f64]| -> Vec<f64> {
            let m = model(&fam, t);
            rule.points().map(|x| m.density(x).unwrap()).collect()
        };
        for s in divergence_chain_slacks(&tab(&a), &tab(&b), rule.weights()).unwrap() {
            prop_assert!(s >= -1e-10);
        }
    }

    #[test]
    fn monomial_normaliser_is_homogeneous(theta in theta_strategy(3), c in 0.2..3.0f64, k in prop::sample::select(vec![2u32, 4, 6])) {
        let fam = poly_family(2);
        let spec = GSpec::monomial(k).unwrap();
        let t = DVector::from_column_slice(&theta);
        let s = IntegrationScheme::default();
        let z1 = z_quadrature(&spec, &fam.features, &fam.measure, &t, &s).unwrap().value;
        let z2 = z_quadrature(&spec, &fam.features, &fam.measure, &(&t * c), &s).unwrap().value;
        prop_assert!((z2 - c.powi(k as i32) * z1).abs() <= 1e-9 * z2.max(1.0));
    }

    #[test]
    fn inverse_cdf_is_monotone(theta in theta_strategy(2), mut us in prop::collection::vec(0.0..1.0f64, 2..50)) {
        let fam = poly_family(1);
        us.sort_by(f64::total_cmp);
        let xs = inverse_cdf_transform(&model(&fam, &theta), &us, 512).unwrap();
        prop_assert!(xs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn nll_gradient_matches_directional_difference(theta in theta_strategy(2), dir in theta_strategy(2)) {
        let fam = poly_family(1);
        let xs: Vec<Vec<f64>> = (0..25).map(|i| vec![(i as f64 + 0.5) / 25.0]).collect();
        let a: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let t = DVector::from_column_slice(&theta);
        let d = DVector::from_column_slice(&dir).normalize();
        let Ok(g) = grad_nll(&t, &xs, &a, &fam) else { return Ok(()); };
        let h = 1e-6;
        let f = |u: &DVector<f64>| nll_augmented(u, &xs, &a, &fam).unwrap();
        let fd = (f(&(&t + &d * h)) - f(&(&t - &d * h))) / (2.0 * h);
        // skip points next to a zero of theta^T psi where the difference is unstable
        prop_assume!(fd.is_finite() && fd.abs() < 1e6);
        prop_assert!((fd - g.dot(&d)).abs() <= 1e-4 * fd.abs().max(1.0));
    }
}

#[test]
fn kernel_is_symmetric_psd_for_random_features() {
    for seed in 0..10 {
        let map = FeatureMap::random_cosine(2, 6, 1.5, seed).unwrap();
        let k = compute_kernel(&map, &BaseMeasure::standard_gaussian(2), &IntegrationScheme::default()).unwrap();
        assert!((k.matrix() - k.matrix().transpose()).amax() == 0.0);
        assert!(k.min_eigenvalue() > -1e-12);
    }
}

#[test]
fn matrix_parameter_trace_normaliser() {
    let fam = poly_family(2);
    let theta = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.2, 0.3, -1.0, 0.4]);
    let m = SquaredFamilyModel::new(fam.features.clone(), fam.measure.clone(), fam.kernel.clone(), Parameter::Matrix(theta.clone()))
        .unwrap();
    let direct = fam
        .measure
        .integrate(&IntegrationScheme::default(), |x| (&theta * fam.features.eval_features(x).unwrap()).norm_squared())
        .unwrap()
        .value;
    assert!((m.normalizer() - direct).abs() < 1e-12);
}
