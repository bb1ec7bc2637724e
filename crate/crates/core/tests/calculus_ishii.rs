use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use wcalc::calculus::{
    derivcheck_suite, fd_dxmu_pointwise, fd_lions_pointwise, partial_hessian, partial_hessian_pair, psi_pair, cross_derivative,
    DerivCheckConfig, DerivKind, Jet, MeasureFunctional, DEFAULT_STEP,
};
use wcalc::fourier::{build_grid, rho_f_squared};
use wcalc::ishii::{assemble_jets, doubling_experiment, product_candidates, DoublingConfig};
use wcalc::quadrature::gauss_hermite_normal;
use wcalc::rng::stream;
use wcalc::samples::random_measure;
use wcalc::{ParticleMeasure, QuadratureGrid, ThetaPoint};

fn grid(d: usize) -> Arc<QuadratureGrid> {
    Arc::new(build_grid(d, QuadratureGrid::default_lambda(d), if d == 1 { 6 } else { 4 }).unwrap())
}

#[test]
fn joint_partial_hessian_of_rho_f2_is_twice_the_coupling_block() {
    let mut rng = stream(41, 0);
    for case in 0..10 {
        let d = 1 + case % 2;
        let g = grid(d);
        let a = random_measure(&mut rng, d, 4, 1.0);
        let b = random_measure(&mut rng, d, 4, 1.0);
        let h = partial_hessian_pair(|m, n| rho_f_squared(m, n, &g).unwrap(), &a, &b, DEFAULT_STEP).unwrap();
        for i in 0..2 * d {
            for j in 0..2 * d {
                let expect = if i % d != j % d { 0.0 } else if (i < d) == (j < d) { 2.0 } else { -2.0 };
                assert!((h[(i, j)] - expect).abs() < 1e-5, "case {case} ({i},{j}) = {}", h[(i, j)]);
            }
        }
    }
}

#[test]
fn derivative_suite_matches_the_pushforward_oracle() {
    let cfg = DerivCheckConfig { instances: 12, ..Default::default() };
    let rows = derivcheck_suite(&cfg, 9).unwrap();
    for kind in DerivKind::ALL {
        assert!(rows.iter().any(|r| r.kind == kind));
    }
    for r in &rows {
        assert!(r.passes(1e-4, 1e-6), "{}", r.csv_line());
    }
}

#[test]
fn distance_to_a_fixed_point_has_unit_translation_structure() {
    let g = grid(2);
    let mut rng = stream(2, 0);
    let target = ThetaPoint::new(0.2, DVector::from_vec(vec![0.1, -0.3]), random_measure(&mut rng, 2, 3, 1.0)).unwrap();
    let u = MeasureFunctional::d_f2_to(target, g);
    let theta = ThetaPoint::new(0.5, DVector::from_vec(vec![0.4, 0.0]), random_measure(&mut rng, 2, 4, 1.0)).unwrap();
    let h = partial_hessian(&u, &theta, DEFAULT_STEP).unwrap();
    assert!((h - 2.0 * DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-6);
    assert!(cross_derivative(&u, &theta, DEFAULT_STEP).unwrap().abs().max() < 1e-6);
}

#[test]
fn closed_form_and_finite_difference_jets_agree() {
    let g = grid(1);
    let mut rng = stream(13, 0);
    let target = ThetaPoint::new(0.3, DVector::from_element(1, 0.2), random_measure(&mut rng, 1, 3, 1.0)).unwrap();
    let u = MeasureFunctional::d_f2_to(target, g).plus(&MeasureFunctional::time_space_poly(0.7)).plus(&MeasureFunctional::y_dot_mean());
    let theta = ThetaPoint::new(0.6, DVector::from_element(1, -0.4), random_measure(&mut rng, 1, 4, 1.0)).unwrap();
    let cf = Jet::from_closed_form(&u, &theta).unwrap();
    let fd = Jet::from_finite_differences(&u, &theta, DEFAULT_STEP).unwrap();
    let probes: Vec<DVector<f64>> = [-0.8, 0.1, 0.9].iter().map(|v| DVector::from_element(1, *v)).collect();
    let gap = cf.gap(&fd, &probes);
    assert!(gap.max() < 1e-4, "{gap:?}");
}

#[test]
fn jets_at_a_diagonal_point_have_vanishing_first_order_slots() {
    let g = grid(2);
    let mut rng = stream(17, 0);
    let th = ThetaPoint::new(0.4, DVector::from_vec(vec![0.3, 0.1]), random_measure(&mut rng, 2, 4, 1.0)).unwrap();
    let x = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.5 } else { 0.1 });
    let (plus, minus) = assemble_jets(5.0, &th, &th, &x, &(-&x), &g).unwrap();
    for jet in [&plus, &minus] {
        assert_eq!(jet.b, 0.0);
        assert!(jet.p.norm() == 0.0);
        for p in th.mu.points() {
            assert!((jet.f)(p).abs().max() < 1e-10);
        }
    }
    assert_eq!(plus.x22, x.view((2, 2), (2, 2)).into_owned());
    assert_eq!(minus.x22, x.view((2, 2), (2, 2)).into_owned());
}

#[test]
fn super_jet_measure_slots_match_finite_differences_of_the_test_function() {
    let g = grid(1);
    let alpha = 3.0;
    let star = ParticleMeasure::from_pairs_1d(&[(-0.6, 0.4), (0.5, 0.6)]).unwrap();
    let tilde = ParticleMeasure::from_pairs_1d(&[(-0.2, 0.7), (0.9, 0.3)]).unwrap();
    let th = ThetaPoint::new(0.5, DVector::from_element(1, 0.1), star.clone()).unwrap();
    let tht = ThetaPoint::new(0.4, DVector::from_element(1, -0.2), tilde.clone()).unwrap();
    let x = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
    let (plus, _) = assemble_jets(alpha, &th, &tht, &x, &x, &g).unwrap();
    let m_tilde = tilde.mean();
    let phi = |mu: &ParticleMeasure| {
        let (psi, _) = psi_pair(mu, &star, &tilde, &g).unwrap();
        0.5 * alpha * ((mu.mean() - &m_tilde).norm_squared() + psi)
    };
    for z in [-0.6, 0.5, 0.2] {
        let zv = DVector::from_element(1, z);
        let f_fd = fd_lions_pointwise(phi, &star, &zv, DEFAULT_STEP, 1e-3).unwrap();
        let g_fd = fd_dxmu_pointwise(phi, &star, &zv, DEFAULT_STEP, 1e-3).unwrap();
        let f_cf = (plus.f)(&zv);
        let g_cf = (plus.g)(&zv);
        assert!((&f_cf - &f_fd).abs().max() < 1e-4 * (1.0 + f_cf.abs().max()), "{f_cf} vs {f_fd}");
        assert!((&g_cf - &g_fd).abs().max() < 1e-4 * (1.0 + g_cf.abs().max()), "{g_cf} vs {g_fd}");
    }
}

/// Gauss–Hermite particle approximation of `N(m, s²)`.
fn gaussian(m: f64, s: f64) -> ParticleMeasure {
    let (x, w) = gauss_hermite_normal(5);
    ParticleMeasure::new(x.iter().map(|v| DVector::from_element(1, m + s * v)).collect(), w).unwrap()
}

#[test]
fn doubling_a_priori_bound_holds_on_a_gaussian_family() {
    let g = grid(1);
    let mus: Vec<ParticleMeasure> = [-1.0, -0.5, 0.0, 0.5, 1.0].iter().flat_map(|&m| [0.5, 1.0].map(|s| gaussian(m, s))).collect();
    let ys: Vec<DVector<f64>> = [-0.2, 0.0, 0.2].iter().map(|v| DVector::from_element(1, *v)).collect();
    let candidates = product_candidates(&[0.5], &ys, &mus).unwrap();
    let u = MeasureFunctional::new("u", |_, y: &DVector<f64>, mu: &ParticleMeasure| (2.0 * mu.mean()[0]).sin() + 0.3 * y[0]);
    let v = MeasureFunctional::new("v", |_, y: &DVector<f64>, mu: &ParticleMeasure| mu.mean()[0] + 0.3 * y[0].cos());
    for eps in [0.1, 0.01] {
        let rep = doubling_experiment(&u, &v, &candidates, &g, &DoublingConfig::new(1.0 / eps, 1e-4, 1)).unwrap();
        assert!(rep.apriori.holds, "eps = {eps}: {:?}", rep.apriori);
        assert!(rep.certificate.holds());
    }
}

#[test]
fn doubling_of_identical_functionals_stays_on_the_diagonal() {
    let g = grid(1);
    let mus: Vec<ParticleMeasure> = [-0.5, 0.0, 0.7].iter().map(|&m| gaussian(m, 0.8)).collect();
    let candidates = product_candidates(&[0.0, 0.5], &[DVector::zeros(1)], &mus).unwrap();
    let u = MeasureFunctional::new("u", |t, _: &DVector<f64>, mu: &ParticleMeasure| t + mu.mean()[0].powi(2));
    let shifted = u.plus(&MeasureFunctional::constant(0.25));
    let rep = doubling_experiment(&shifted, &u, &candidates, &g, &DoublingConfig::new(1e3, 1e-6, 1)).unwrap();
    assert_eq!(rep.argmax.0, rep.argmax.1);
    assert!((rep.max_value - 0.25).abs() < 1e-12);
    assert!(rep.diagonal_check);
}
