use nalgebra::{DMatrix, DVector};
use wcalc::calculus::MeasureFunctional;
use wcalc::filtering::control::ControlPath;
use wcalc::filtering::flow::cost_j;
use wcalc::filtering::{
    dpp_check, flow_lipschitz_check, ito_mc_rate, ito_residual, simulate_flow, value_estimate, weak_residual, DppConfig, FilterModel,
    McConfig,
};
use wcalc::fourier::build_grid;
use wcalc::ParticleMeasure;

fn mu0() -> ParticleMeasure {
    ParticleMeasure::from_pairs_1d(&[(-0.5, 0.3), (0.2, 0.4), (0.8, 0.3)]).unwrap()
}

fn smooth_phi() -> MeasureFunctional {
    MeasureFunctional::linear(
        "sin+quad",
        |x: &DVector<f64>| x[0].sin() + 0.5 * x[0] * x[0],
        |x: &DVector<f64>| DVector::from_element(1, x[0].cos() + x[0]),
        |x: &DVector<f64>| DMatrix::from_element(1, 1, 1.0 - x[0].sin()),
    )
}

#[test]
fn sigma_tilde_only_flow_is_a_rigid_translation() {
    let model = FilterModel::sigma_tilde_only(vec![vec![0.5]], 1.0);
    let flow = simulate_flow(&model, &mu0(), &ControlPath::constant(0.0, 1.0, 0), 6, 0.1, 3, 0).unwrap();
    assert_eq!(flow.measure(0).mean(), mu0().mean());
    for k in 0..flow.len() {
        let m = flow.measure(k);
        let (w, _) = m.w2(&mu0()).unwrap();
        assert!((w * w - 0.5 * flow.y_path[k].norm_squared()).abs() < 1e-12);
    }
}

#[test]
fn w2_slope_in_the_sigma_tilde_only_model_is_half_the_trace() {
    let st = vec![vec![0.5, 0.2], vec![0.0, 0.4]];
    let half_trace = 0.5 * (0.25 + 0.04 + 0.16);
    let model = FilterModel::sigma_tilde_only(st, 1.0);
    let mu = ParticleMeasure::uniform(vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![1.0, -0.5])]).unwrap();
    let grid = build_grid(2, 9, 3).unwrap();
    let offsets = [0.05, 0.1, 0.15, 0.2];
    let rep = flow_lipschitz_check(&model, &mu, 0.0, &[0], &offsets, &McConfig::new(2000, 2, 0.01, 4), &grid).unwrap();
    assert!((rep.w2_slope.mean - half_trace).abs() <= 3.0 * rep.w2_slope.std_error, "{:?}", rep.w2_slope);
}

#[test]
fn general_model_flow_moments_grow_linearly_and_robustly_in_dt() {
    let model = FilterModel::example_gaussian_decay();
    let grid = build_grid(1, 8, 5).unwrap();
    let offsets = [0.02, 0.04, 0.06, 0.08, 0.1];
    let slope = |dt: f64| {
        let rep = flow_lipschitz_check(&model, &mu0(), 0.0, &[0, 1, 2], &offsets, &McConfig::new(1500, 24, dt, 6), &grid).unwrap();
        assert!(rep.w2_r2 >= 0.95 && rep.total_r2 >= 0.95, "{rep:?}");
        rep.total_slope.mean
    };
    let (coarse, fine) = (slope(0.01), slope(0.005));
    assert!((coarse - fine).abs() <= 0.2 * fine, "{coarse} vs {fine}");
}

#[test]
fn weak_form_residuals_vanish_with_dt() {
    let model = FilterModel::example_gaussian_decay();
    for dt in [0.02, 0.01] {
        let rep = weak_residual(&model, &mu0(), 0.0, 2, (0.2 / dt) as usize, &McConfig::new(400, 32, dt, 8)).unwrap();
        for r in &rep.rows {
            // Mean per-step residual is O(dt²), i.e. O(dt) after dividing by dt.
            let tol = 3.0 * r.per_step.std_error + 2.0 * dt * dt;
            assert!(r.per_step.mean.abs() <= tol, "dt = {dt}: {r:?}");
        }
    }
}

#[test]
fn ito_residuals_are_second_order_in_the_step() {
    let model = FilterModel::example_gaussian_decay();
    for psi in [MeasureFunctional::mean_coordinate(0), MeasureFunctional::mean_norm_sq(), smooth_phi()] {
        let rep = ito_residual(&model, &psi, 0.0, &mu0(), 2, &[0.1, 0.05, 0.025], 4, 3).unwrap();
        assert!(rep.exact || rep.slope.unwrap() >= 1.8, "{rep:?}");
    }
}

#[test]
fn classical_generator_without_common_noise() {
    // With σ̃ = 0 the generator of ∫φ dμ is ∫ b φ' + ½ σ² φ'' dμ.
    let mut model = FilterModel::example_gaussian_decay();
    model.sigma_tilde = wcalc::filtering::model::SigmaSpec::Zero;
    let psi = smooth_phi();
    let g = wcalc::filtering::ito_generator(&model, &psi, 0.0, &mu0(), 1).unwrap();
    let by_hand: f64 = mu0()
        .iter()
        .map(|(x, w)| {
            let b = model.b(x, 1)[0];
            let s = model.sigma(x, 1)[(0, 0)];
            w * (b * (x[0].cos() + x[0]) + 0.5 * s * s * (1.0 - x[0].sin()))
        })
        .sum();
    assert!((g - by_hand).abs() < 1e-14);
}

#[test]
fn partial_hessian_term_drives_the_mean_square_at_trace_rate() {
    let model = FilterModel::sigma_tilde_only(vec![vec![0.5]], 1.0);
    let rep = ito_mc_rate(&model, &MeasureFunctional::mean_norm_sq(), 0.0, &mu0(), 0, 0.1, &McConfig::new(4000, 3, 0.01, 12)).unwrap();
    assert!((rep.generator - 0.25).abs() < 1e-15);
    assert!(rep.within_3se, "{rep:?}");
}

#[test]
fn separable_value_and_dpp() {
    let model = FilterModel::control_separable(&[0.5, -0.25, 1.0], 0.3, 1.0);
    let cfg = McConfig::new(50, 3, 0.05, 2);
    let v = value_estimate(&model, &mu0(), &[0.0, 0.5, 1.0], &cfg).unwrap();
    let analytic = 1.0 * -0.25 + 0.3;
    assert!((v.v_hat - analytic).abs() <= (3.0 * v.std_error).max(1e-9));
    let rep = dpp_check(&model, &mu0(), &DppConfig { t: 0.0, r: 0.5, later: vec![], outer: cfg, inner_paths: 20 }).unwrap();
    assert!(rep.within_error, "{rep:?}");
}

#[test]
fn singleton_dpp_gap_is_within_nested_error() {
    let mut model = FilterModel::example_gaussian_decay();
    model.controls = vec![vec![0.5]];
    let cfg = McConfig::new(300, 8, 0.05, 5);
    let rep = dpp_check(&model, &mu0(), &DppConfig { t: 0.0, r: 0.5, later: vec![], outer: cfg, inner_paths: 40 }).unwrap();
    assert!(rep.within_error, "{rep:?}");
}

#[test]
fn tree_value_never_exceeds_any_open_loop_cost() {
    let model = FilterModel::example_gaussian_decay();
    let cfg = McConfig::new(80, 8, 0.05, 9);
    let bp = [0.0, 0.5, 1.0];
    let v = value_estimate(&model, &mu0(), &bp, &cfg).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            let j = cost_j(&model, &mu0(), &ControlPath::open_loop(bp.to_vec(), vec![a, b]), cfg.n_paths, cfg.n_particles, cfg.dt, cfg.seed).unwrap();
            assert!(v.v_hat <= j.mean + 1e-12);
        }
    }
    assert!(v.gap_bound >= -1e-12);
}
