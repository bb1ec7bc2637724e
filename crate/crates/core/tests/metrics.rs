use nalgebra::DVector;
use proptest::prelude::*;
use wcalc::fourier::{build_grid, dual_norm_lambda, rho_f};
use wcalc::gauge::rho_sigma;
use wcalc::rng::stream;
use wcalc::samples::{random_measure, random_uniform_measure, spreading_sequence};
use wcalc::{GaugeParams, ParticleMeasure, QuadratureGrid};

fn grid(d: usize, level: u32) -> QuadratureGrid {
    build_grid(d, QuadratureGrid::default_lambda(d), level).unwrap()
}

/// Adaptive Simpson on `[a, b]`.
fn adaptive_simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64, whole: f64, m: f64, fm: f64, tol: f64, depth: u32) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1) + rec(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(&f, a, fa, b, fb);
    rec(&f, a, fa, b, fb, whole, m, fm, tol, 50)
}

#[test]
fn one_dimensional_weight_integral_matches_adaptive_reference() {
    // ∫(1+k²)^{−8} dk with k = tan θ becomes ∫ cos¹⁴θ dθ over (−π/2, π/2).
    let half_pi = std::f64::consts::FRAC_PI_2;
    let reference = adaptive_simpson(|t: f64| t.cos().powi(14), -half_pi, half_pi, 1e-15);
    let g = build_grid(1, 8, 6).unwrap();
    assert!(g.weights.iter().all(|w| *w > 0.0));
    let total: f64 = g.weights.iter().sum();
    assert!((total - reference).abs() < 1e-10, "{total} vs {reference}");
    assert!((g.integrate(|_| 1.0) - reference).abs() < 1e-10);
}

#[test]
fn rho_f_is_stable_under_refinement() {
    for d in [1usize, 2] {
        let mut rng = stream(3, d as u64);
        let pairs: Vec<_> = (0..8).map(|_| (random_measure(&mut rng, d, 6, 1.0), random_measure(&mut rng, d, 6, 1.0))).collect();
        let base = if d == 1 { 6 } else { 4 };
        let (g0, g1) = (grid(d, base), grid(d, base + 1));
        for (a, b) in &pairs {
            let diff = (rho_f(a, b, &g0).unwrap() - rho_f(a, b, &g1).unwrap()).abs();
            assert!(diff < 1e-7, "d = {d}: {diff:e}");
        }
    }
}

#[test]
fn rho_f_symmetry_and_triangle_inequality() {
    for d in [1usize, 2] {
        let g = grid(d, if d == 1 { 6 } else { 4 });
        let mut rng = stream(11, d as u64);
        for _ in 0..25 {
            let m: Vec<ParticleMeasure> = (0..3).map(|_| random_measure(&mut rng, d, 5, 1.5)).collect();
            let ab = rho_f(&m[0], &m[1], &g).unwrap();
            let ba = rho_f(&m[1], &m[0], &g).unwrap();
            assert!((ab - ba).abs() < 1e-14);
            let bc = rho_f(&m[1], &m[2], &g).unwrap();
            let ac = rho_f(&m[0], &m[2], &g).unwrap();
            assert!(ac <= ab + bc + 1e-9);
        }
    }
}

#[test]
fn dual_norm_to_rho_f_ratio_is_bounded() {
    let mut c_emp: f64 = 0.0;
    for d in [1usize, 2] {
        let g = grid(d, if d == 1 { 6 } else { 4 });
        let mut rng = stream(5, d as u64);
        for _ in 0..100 {
            let a = random_measure(&mut rng, d, 5, 2.0);
            let b = random_measure(&mut rng, d, 5, 2.0);
            c_emp = c_emp.max(dual_norm_lambda(&a, &b, &g).unwrap() / rho_f(&a, &b, &g).unwrap());
        }
    }
    println!("C_emp = {c_emp:.6}");
    assert!(c_emp.is_finite() && c_emp > 0.0);
}

#[test]
fn rho_f_and_w2_agree_on_shrinking_translates() {
    let g = grid(2, 4);
    let mut rng = stream(8, 0);
    let mu = random_measure(&mut rng, 2, 5, 1.0);
    let c = DVector::from_vec(vec![0.7, -0.4]);
    for j in [1.0, 4.0, 16.0, 256.0] {
        let shift = &c / j;
        let nu = mu.translate(&shift);
        // Only the mean term of ρ_F moves; W₂ carries the ½ in its cost.
        assert!((rho_f(&mu, &nu, &g).unwrap() - shift.norm()).abs() < 1e-12);
        assert!((mu.w2(&nu).unwrap().0 - shift.norm() / 2f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn spreading_sequence_is_cauchy_but_stays_away_from_the_weak_limit() {
    let g = grid(1, 6);
    let dirac = ParticleMeasure::dirac(DVector::zeros(1));
    let ns: Vec<u32> = (2..=10).map(|p| 1 << p).collect();
    let steps: Vec<f64> = ns.iter().map(|&n| rho_f(&spreading_sequence(1, n), &spreading_sequence(1, 2 * n), &g).unwrap()).collect();
    assert!(steps.iter().all(|s| *s < 0.05));
    // Small n rise before the O(1/n) decay sets in.
    let peak = steps.iter().enumerate().fold(0, |b, (i, s)| if *s > steps[b] { i } else { b });
    assert!(steps[peak..].windows(2).all(|w| w[1] < w[0]), "{steps:?}");
    assert!(*steps.last().unwrap() < 1e-3);
    for &n in &ns {
        assert!(rho_f(&spreading_sequence(1, n), &dirac, &g).unwrap() >= 1.0 - 1e-6);
    }
}

#[test]
fn w2_decomposes_into_mean_and_centered_parts() {
    let mut rng = stream(21, 0);
    for case in 0..50 {
        let d = 1 + case % 2;
        let n = 2 + case % 11;
        let a = random_uniform_measure(&mut rng, d, n, 2.0);
        let b = random_uniform_measure(&mut rng, d, n, 2.0);
        let (w, plan) = a.w2(&b).unwrap();
        assert!(plan.marginal_error(a.weights(), b.weights()) < 1e-10);
        let centered = a.center().w2(&b.center()).unwrap().0;
        let lhs = w * w;
        let rhs = 0.5 * (a.mean() - b.mean()).norm_squared() + centered * centered;
        assert!((lhs - rhs).abs() < 1e-8, "case {case}: {lhs} vs {rhs}");
    }
}

#[test]
fn gauge_refinement_stays_within_tail_bound() {
    let mut rng = stream(31, 0);
    for case in 0..20 {
        let d = 1 + case % 2;
        let a = random_measure(&mut rng, d, 4, 0.8);
        let b = random_measure(&mut rng, d, 4, 0.8);
        let p = GaugeParams::default_for(d);
        let coarse = rho_sigma(&a, &b, &p).unwrap();
        let fine = rho_sigma(&a, &b, &p.refined()).unwrap();
        assert!((fine.value - coarse.value).abs() < coarse.tail_bound, "case {case}");
    }
}

#[test]
fn gauge_of_two_diracs_is_their_distance() {
    for d in [1usize, 2] {
        let c = DVector::from_fn(d, |i, _| 0.3 + i as f64);
        let r = rho_sigma(&ParticleMeasure::dirac(DVector::zeros(d)), &ParticleMeasure::dirac(c.clone()), &GaugeParams::default_for(d)).unwrap();
        assert!((r.value - c.norm()).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translation_moves_w2_by_half_squared_shift(seed in 0u64..10_000, cx in -2.0f64..2.0, cy in -2.0f64..2.0) {
        let mut rng = stream(seed, 1);
        let mu = random_measure(&mut rng, 2, 4, 1.0);
        let c = DVector::from_vec(vec![cx, cy]);
        let (w, _) = mu.w2(&mu.translate(&c)).unwrap();
        prop_assert!((w * w - 0.5 * c.norm_squared()).abs() < 1e-9);
    }

    #[test]
    fn pushforward_keeps_mass_and_rho_sigma_is_symmetric(seed in 0u64..10_000) {
        let mut rng = stream(seed, 2);
        let a = random_measure(&mut rng, 1, 3, 1.0);
        let b = random_measure(&mut rng, 1, 3, 1.0);
        let pushed = a.pushforward(|x| x.map(|v| v.sin())).unwrap();
        prop_assert_eq!(pushed.weights(), a.weights());
        let p = GaugeParams::new(1.0, 3, 2).unwrap();
        prop_assert_eq!(rho_sigma(&a, &b, &p).unwrap().value, rho_sigma(&b, &a, &p).unwrap().value);
    }
}
