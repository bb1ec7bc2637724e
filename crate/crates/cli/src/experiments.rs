//! One function per experiment id. Each returns metrics, named assertions
//! and CSV detail files.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Map, Value};
use wcalc::calculus::{derivcheck_suite, DerivCheckRow, DerivKind, MeasureFunctional};
use wcalc::filtering::control::ControlPath;
use wcalc::filtering::flow::cost_j;
use wcalc::filtering::{
    dpp_check, flow_lipschitz_check, ito_mc_rate, ito_residual, simulate_flow, value_estimate, DppConfig, FilterModel,
};
use wcalc::fourier::{dual_norm_lambda, rho_f, rho_f_parts};
use wcalc::gauge::rho_sigma;
use wcalc::ishii::{assemble_jets, check_sandwich, doubling_experiment, product_candidates, DoublingConfig, SandwichInstance, SandwichMode, SandwichStatus};
use wcalc::quadrature::gauss_hermite_normal;
use wcalc::rng::stream;
use wcalc::samples::{random_measure, spreading_sequence};
use wcalc::{ParticleMeasure, ThetaPoint};

use crate::config::{ExperimentConfig, SandwichCase};

pub const EXPERIMENTS: [&str; 9] =
    ["metrics", "derivcheck", "gauge", "ishii-check", "filter-sim", "value", "dpp-check", "ito-check", "noncompleteness-demo"];

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub metrics: Map<String, Value>,
    pub assertions: Vec<Assertion>,
    pub files: Vec<(String, String)>,
    /// Echoed to standard output after the files are written.
    pub stdout: Option<String>,
}

impl Outcome {
    fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(key.to_string(), serde_json::to_value(value).expect("serializable metric"));
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion { name: name.into(), passed, detail: detail.into() });
    }

    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }
}

pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub seed: u64,
    pub grid_level: Option<u32>,
}

pub fn run(experiment: &str, ctx: &Context) -> wcalc::Result<Outcome> {
    match experiment {
        "metrics" => metrics(ctx),
        "derivcheck" => derivcheck(ctx),
        "gauge" => gauge(ctx),
        "ishii-check" => ishii_check(ctx),
        "filter-sim" => filter_sim(ctx),
        "value" => value(ctx),
        "dpp-check" => dpp(ctx),
        "ito-check" => ito(ctx),
        "noncompleteness-demo" => noncompleteness(ctx),
        other => Err(wcalc::Error::Unknown { kind: "experiment", name: other.to_string() }),
    }
}

fn metrics(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let (mu, nu) = ctx.config.measure_pair()?;
    let dim = mu.dim();
    let grid = ctx.config.grid(dim, ctx.grid_level)?;
    let (w2, plan) = mu.w2(&nu)?;
    let parts = rho_f_parts(&mu, &nu, &grid)?;
    let rf = parts.total_sq().sqrt();
    let rs = rho_sigma(&mu, &nu, &ctx.config.gauge(dim))?;
    out.metric("w2", w2);
    out.metric("w2_squared", plan.cost);
    out.metric("rho_F", rf);
    out.metric("rho_F_parts", parts);
    out.metric("rho_sigma", rs.value);
    out.metric("rho_sigma_tail_bound", rs.tail_bound);
    out.metric("dual_norm", dual_norm_lambda(&mu, &nu, &grid)?);
    out.metric("grid_nodes", grid.len());

    let marg = plan.marginal_error(mu.weights(), nu.weights());
    out.check("plan_marginals", marg <= 1e-10, format!("max marginal error {marg:e}"));
    let sym = (rho_f(&nu, &mu, &grid)? - rf).abs();
    out.check("rho_F_symmetric", sym <= 1e-12, format!("{sym:e}"));
    let rs_rev = rho_sigma(&nu, &mu, &ctx.config.gauge(dim))?.value;
    out.check("rho_sigma_symmetric", rs_rev == rs.value, format!("{rs_rev} vs {}", rs.value));
    if mu.is_uniform() && nu.is_uniform() && mu.len() == nu.len() {
        let centered = mu.center().w2(&nu.center())?.0;
        let gap = (plan.cost - 0.5 * (mu.mean() - nu.mean()).norm_squared() - centered * centered).abs();
        out.check("w2_decomposition", gap < 1e-8, format!("{gap:e}"));
    }
    out.file("plan.csv", plan.to_csv());
    Ok(out)
}

fn derivcheck(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let mut cfg = ctx.config.derivcheck.unwrap_or_default();
    if let Some(l) = ctx.grid_level.or(ctx.config.grid_level) {
        cfg.grid_level_1d = l;
        cfg.grid_level_2d = l;
    }
    let rows = derivcheck_suite(&cfg, ctx.seed)?;
    for kind in DerivKind::ALL {
        let of_kind: Vec<&DerivCheckRow> = rows.iter().filter(|r| r.kind == kind).collect();
        let failed = of_kind.iter().filter(|r| !r.passes(1e-4, 1e-6)).count();
        let max_rel = of_kind.iter().map(|r| r.rel_err).fold(0.0, f64::max);
        out.metric(kind.label(), json!({ "instances": of_kind.len(), "failed": failed, "max_rel_err": max_rel }));
        out.check(kind.label(), failed == 0 && !of_kind.is_empty(), format!("{failed} of {} outside 1e-4 relative", of_kind.len()));
    }
    let mut csv = format!("{}\n", DerivCheckRow::csv_header());
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    out.file("derivcheck.csv", csv);
    Ok(out)
}

fn gauge(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let (mu, nu) = ctx.config.measure_pair()?;
    let params = ctx.config.gauge(mu.dim());
    let coarse = rho_sigma(&mu, &nu, &params)?;
    let fine = rho_sigma(&mu, &nu, &params.refined())?;
    let change = (fine.value - coarse.value).abs();
    out.metric("params", params);
    out.metric("rho_sigma", coarse.value);
    out.metric("tail_bound", coarse.tail_bound);
    out.metric("refined_rho_sigma", fine.value);
    out.metric("refinement_change", change);
    out.check("truncation_contract", change < coarse.tail_bound || change == 0.0, format!("change {change:e} vs tail {:e}", coarse.tail_bound));
    out.check("partials_nonnegative", coarse.partials.iter().all(|p| p.raw >= 0.0), "every cell term is nonnegative");
    out.stdout = Some(coarse.to_csv());
    out.file("gauge_partials.csv", coarse.to_csv());
    Ok(out)
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> wcalc::Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(wcalc::Error::InvalidParameter("matrices must be square and nonempty".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn default_sandwich_cases() -> Vec<SandwichCase> {
    let (alpha, epsilon) = (2.0, 0.5);
    let c = 1.0 / epsilon + 2.0 * alpha;
    let diag = |v: f64| (0..2).map(|i| (0..2).map(|j| if i == j { v } else { 0.0 }).collect()).collect::<Vec<Vec<f64>>>();
    let case = |x, xt, expected| SandwichCase { x, x_tilde: xt, alpha, epsilon, mode: SandwichMode::Ishii, expected: Some(expected) };
    vec![
        case(diag(0.0), diag(0.0), SandwichStatus::Satisfied),
        case(diag(-2.0 * c), diag(0.0), SandwichStatus::LeftViolation),
        case(diag(0.5), diag(0.5), SandwichStatus::RightViolation),
    ]
}

fn gaussian_particles(m: f64, s: f64) -> wcalc::Result<ParticleMeasure> {
    let (x, w) = gauss_hermite_normal(5);
    ParticleMeasure::new(x.iter().map(|v| DVector::from_element(1, m + s * v)).collect(), w)
}

fn ishii_check(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let cases = ctx.config.ishii.sandwich.clone().unwrap_or_else(default_sandwich_cases);
    let mut reports = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let inst = SandwichInstance::new(rows_to_matrix(&c.x)?, rows_to_matrix(&c.x_tilde)?, c.alpha, c.epsilon)?;
        let rep = check_sandwich(&inst, c.mode)?;
        if let Some(e) = c.expected {
            out.check(format!("sandwich_{i}"), rep.status == e, format!("{:?}, expected {e:?}", rep.status));
        }
        reports.push(rep);
    }
    out.metric("sandwich", reports);

    if ctx.config.ishii.jets {
        let dim = ctx.config.dim.unwrap_or(1);
        let grid = Arc::new(ctx.config.grid(dim, ctx.grid_level)?);
        let mut rng = stream(ctx.seed, 0);
        let mu = random_measure(&mut rng, dim, 4, 1.0);
        let th = ThetaPoint::new(0.5, DVector::from_element(dim, 0.1), mu)?;
        let x = DMatrix::from_fn(2 * dim, 2 * dim, |i, j| if i == j { 0.4 } else { 0.1 });
        let (plus, minus) = assemble_jets(3.0, &th, &th, &x, &x, &grid)?;
        let mut worst: f64 = 0.0;
        for jet in [&plus, &minus] {
            worst = worst.max(jet.b.abs()).max(jet.p.abs().max());
            for p in th.mu.points() {
                worst = worst.max((jet.f)(p).abs().max());
            }
        }
        out.metric("diagonal_jet_first_order_max", worst);
        out.check("diagonal_jets_vanish", worst <= 1e-10, format!("{worst:e}"));
    }

    if let Some(d) = &ctx.config.ishii.doubling {
        let grid = ctx.config.grid(1, ctx.grid_level)?;
        let mut mus = Vec::new();
        for &m in &d.means {
            for &s in &d.stds {
                mus.push(gaussian_particles(m, s)?);
            }
        }
        let ys: Vec<DVector<f64>> = d.ys.iter().map(|v| DVector::from_element(1, *v)).collect();
        let candidates = product_candidates(&d.times, &ys, &mus)?;
        let u = MeasureFunctional::new("u", |_, y: &DVector<f64>, mu: &ParticleMeasure| (2.0 * mu.mean()[0]).sin() + 0.3 * y[0]);
        let v = MeasureFunctional::new("v", |_, y: &DVector<f64>, mu: &ParticleMeasure| mu.mean()[0] + 0.3 * y[0].cos());
        let mut reps = Vec::new();
        for &eps in &d.epsilons {
            let rep = doubling_experiment(&u, &v, &candidates, &grid, &DoublingConfig::new(1.0 / eps, d.kappa, 1))?;
            out.check(format!("apriori_bound_eps_{eps}"), rep.apriori.holds, format!("{:.6} <= {:.6}", rep.apriori.observed, rep.apriori.bound));
            out.check(format!("certificate_eps_{eps}"), rep.certificate.holds(), "anchor distances within κ/(δ2^j)");
            reps.push(rep);
        }
        out.metric("doubling", reps);
    }
    Ok(out)
}

fn default_control(model: &FilterModel) -> ControlPath {
    ControlPath::constant(0.0, model.horizon, 0)
}

fn filter_sim(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let model = ctx.config.model("gaussian_decay")?;
    let mu0 = ctx.config.mu0(model.dim)?;
    let mc = ctx.config.mc(ctx.seed);
    let control = ctx.config.filter.control.clone().unwrap_or_else(|| default_control(&model));
    let flow = simulate_flow(&model, &mu0, &control, mc.n_particles, mc.dt, ctx.seed, ctx.config.filter.path)?;
    let initial = flow.measure(0);
    let start_gap = (initial.mean() - mu0.mean()).abs().max().max((initial.covariance() - mu0.covariance()).abs().max());
    out.check("initial_law", start_gap <= 1e-12, format!("moment gap {start_gap:e}"));
    if (0..model.n_controls()).all(|a| model.sigma_tilde(a).iter().all(|v| *v == 0.0)) {
        out.check("no_common_noise_no_shift", flow.y_path.iter().all(|y| y.iter().all(|v| *v == 0.0)), "Y ≡ 0");
    }
    let j = cost_j(&model, &mu0, &control, mc.n_paths, mc.n_particles, mc.dt, ctx.seed)?;
    out.metric("cost_J", j);
    out.metric("steps", flow.len() - 1);
    out.file("flow.csv", flow.to_csv());

    let offsets = &ctx.config.filter.offsets;
    if !offsets.is_empty() {
        let grid = ctx.config.grid(model.dim, ctx.grid_level)?;
        let controls: Vec<usize> = (0..model.n_controls()).collect();
        let rep = flow_lipschitz_check(&model, &mu0, control.start(), &controls, offsets, &mc, &grid)?;
        out.check("moment_linear_fit", rep.total_r2 >= 0.95, format!("R² = {:.4}", rep.total_r2));
        let mut csv = String::from("offset,w2_sq,w2_sq_se,dual_sq,dual_sq_se\n");
        for r in &rep.rows {
            csv.push_str(&format!("{:e},{:e},{:e},{:e},{:e}\n", r.offset, r.w2_sq.mean, r.w2_sq.std_error, r.dual_sq.mean, r.dual_sq.std_error));
        }
        out.file("moments.csv", csv);
        out.metric("moments", rep);
    }
    Ok(out)
}

fn breakpoints(model: &FilterModel, configured: &Option<Vec<f64>>) -> Vec<f64> {
    configured.clone().unwrap_or_else(|| vec![0.0, 0.5 * model.horizon, model.horizon])
}

fn value(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let model = ctx.config.model("gaussian_decay")?;
    let mu0 = ctx.config.mu0(model.dim)?;
    let bp = breakpoints(&model, &ctx.config.value.breakpoints);
    let v = value_estimate(&model, &mu0, &bp, &ctx.config.mc(ctx.seed))?;
    out.check("tree_not_above_open_loop", v.gap_bound >= -1e-12, format!("gap bound {:e}", v.gap_bound));
    let mut csv = String::from("node,control\n");
    for (i, a) in v.policy.values.iter().enumerate() {
        csv.push_str(&format!("{i},{a}\n"));
    }
    out.file("policy.csv", csv);
    out.metric("value", v);
    Ok(out)
}

fn dpp(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let model = ctx.config.model("control_separable")?;
    let mu0 = ctx.config.mu0(model.dim)?;
    let s = &ctx.config.dpp;
    let cfg = DppConfig {
        t: s.t,
        r: s.r.unwrap_or(0.5 * (s.t + model.horizon)),
        later: s.later.clone(),
        outer: ctx.config.mc(ctx.seed),
        inner_paths: s.inner_paths,
    };
    let rep = dpp_check(&model, &mu0, &cfg)?;
    out.check("dpp_gap", rep.within_error, format!("gap {:e}, combined SE {:e}", rep.gap, rep.combined_std_error));
    let mut csv = String::from("control,mean,std_error\n");
    for (a, e) in rep.rhs_per_control.iter().enumerate() {
        csv.push_str(&format!("{a},{:e},{:e}\n", e.mean, e.std_error));
    }
    out.file("dpp.csv", csv);
    out.metric("dpp", rep);
    Ok(out)
}

/// `∫ Σᵢ sin(xᵢ) + ½|x|² dμ`.
pub fn sin_quad() -> MeasureFunctional {
    MeasureFunctional::linear(
        "sin_quad",
        |x: &DVector<f64>| x.iter().map(|v| v.sin()).sum::<f64>() + 0.5 * x.norm_squared(),
        |x: &DVector<f64>| x.map(|v| v.cos() + v),
        |x: &DVector<f64>| DMatrix::from_diagonal(&x.map(|v| 1.0 - v.sin())),
    )
}

fn functional(name: &str) -> wcalc::Result<MeasureFunctional> {
    match name {
        "mean_coordinate" => Ok(MeasureFunctional::mean_coordinate(0)),
        "mean_norm_sq" => Ok(MeasureFunctional::mean_norm_sq()),
        "sin_quad" => Ok(sin_quad()),
        _ => Err(wcalc::Error::Unknown { kind: "functional", name: name.to_string() }),
    }
}

fn ito(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let model = ctx.config.model("gaussian_decay")?;
    let mu0 = ctx.config.mu0(model.dim)?;
    let s = &ctx.config.ito;
    let mut csv = String::from("functional,delta,expectation,predicted,residual\n");
    let mut reports = Vec::new();
    for name in &s.functionals {
        let psi = functional(name)?;
        let rep = ito_residual(&model, &psi, s.t, &mu0, s.control, &s.deltas, s.substeps, s.gh_points)?;
        let detail = match rep.slope {
            Some(sl) => format!("slope {sl:.4}"),
            None => "residual at rounding level".to_string(),
        };
        out.check(format!("ito_slope_{name}"), rep.exact || rep.slope.is_some_and(|v| v >= 1.8), detail);
        for r in &rep.rows {
            csv.push_str(&format!("{name},{:e},{:e},{:e},{:e}\n", r.delta, r.expectation, r.predicted, r.residual));
        }
        reports.push(rep);
    }
    out.metric("residuals", reports);
    if let Some(delta) = s.rate_delta {
        let rep = ito_mc_rate(&model, &MeasureFunctional::mean_norm_sq(), s.t, &mu0, s.control, delta, &ctx.config.mc(ctx.seed))?;
        out.check("mean_norm_sq_rate", rep.within_3se, format!("{:.6} ± {:.6} vs {:.6}", rep.rate.mean, rep.rate.std_error, rep.generator));
        out.metric("rate", rep);
    }
    out.file("ito.csv", csv);
    Ok(out)
}

fn noncompleteness(ctx: &Context) -> wcalc::Result<Outcome> {
    let mut out = Outcome::default();
    let s = &ctx.config.noncompleteness;
    if s.n_min < 1 || s.n_max < s.n_min {
        return Err(wcalc::Error::InvalidParameter("need 1 <= n_min <= n_max".into()));
    }
    let dim = ctx.config.dim.unwrap_or(1);
    let grid = ctx.config.grid(dim, ctx.grid_level)?;
    let dirac = ParticleMeasure::dirac(DVector::zeros(dim));
    let mut csv = String::from("n,rho_F_n_2n,rho_F_n_dirac\n");
    let mut steps = Vec::new();
    let mut to_dirac = Vec::new();
    let mut n = s.n_min;
    while n <= s.n_max {
        let mu = spreading_sequence(dim, n);
        let step = rho_f(&mu, &spreading_sequence(dim, 2 * n), &grid)?;
        let far = rho_f(&mu, &dirac, &grid)?;
        csv.push_str(&format!("{n},{step:e},{far:e}\n"));
        steps.push(step);
        to_dirac.push(far);
        n *= 2;
    }
    let peak = steps.iter().enumerate().fold(0, |b, (i, v)| if *v > steps[b] { i } else { b });
    out.check("steps_below_0.05", steps.iter().all(|v| *v < 0.05), format!("max {:e}", steps[peak]));
    out.check("steps_decrease_after_peak", steps[peak..].windows(2).all(|w| w[1] < w[0]), format!("peak at index {peak}"));
    let last = *steps.last().expect("at least one n");
    out.check("final_step_below_1e-3", last < 1e-3, format!("{last:e}"));
    let min_far = to_dirac.iter().copied().fold(f64::INFINITY, f64::min);
    out.check("distance_to_dirac_at_least_one", min_far >= 1.0 - 1e-6, format!("min {min_far:.12}"));
    out.metric("rho_F_n_2n", steps);
    out.metric("rho_F_n_dirac", to_dirac);
    out.file("noncompleteness.csv", csv);
    Ok(out)
}
