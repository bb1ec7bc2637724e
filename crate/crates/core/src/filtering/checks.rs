//! Hamiltonian, Itô-formula residuals, moment bounds of the measure flow and
//! the weak form of the conditional-law equation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::control::ControlPath;
use super::flow::{path_seed, simulate_path, Estimate, ParticleState};
use super::model::FilterModel;
use super::value::McConfig;
use crate::calculus::{is_symmetric, MeasureFunctional};
use crate::error::{Error, Result};
use crate::fourier::{dual_norm_lambda, QuadratureGrid, ThetaPoint};
use crate::measures::ParticleMeasure;
use crate::quadrature::gauss_hermite_normal;
use crate::reduce::pairwise_sum;

fn check_control(model: &FilterModel, a: usize) -> Result<()> {
    if a >= model.n_controls() {
        return Err(Error::InvalidParameter(format!("control index {a} out of range")));
    }
    Ok(())
}

/// `K(a, μ, p, q, M) = ∫ f(x,a) + b(x,a)·p(x) + ½Tr(q(x)σσᵀ(x,a)) μ(dx) + ½Tr(σ̃σ̃ᵀ(a) M)`.
pub fn hamiltonian_k<P, Q>(model: &FilterModel, a: usize, mu: &ParticleMeasure, p: P, q: Q, m: &DMatrix<f64>) -> Result<f64>
where
    P: Fn(&DVector<f64>) -> DVector<f64>,
    Q: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    check_control(model, a)?;
    if mu.dim() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: mu.dim() });
    }
    if m.shape() != (model.dim, model.dim) || !is_symmetric(m, 1e-12) {
        return Err(Error::InvalidParameter("M must be a symmetric d x d matrix".into()));
    }
    let terms: Vec<f64> = mu
        .iter()
        .map(|(x, w)| {
            let s = model.sigma(x, a);
            w * (model.f(x, a) + model.b(x, a).dot(&p(x)) + 0.5 * (q(x) * &s * s.transpose()).trace())
        })
        .collect();
    let st = model.sigma_tilde(a);
    Ok(pairwise_sum(&terms) + 0.5 * (&st * st.transpose() * m).trace())
}

/// `min_a K(a, μ, p, q, M)` and the first minimizing control.
pub fn hamiltonian_inf<P, Q>(model: &FilterModel, mu: &ParticleMeasure, p: P, q: Q, m: &DMatrix<f64>) -> Result<(f64, usize)>
where
    P: Fn(&DVector<f64>) -> DVector<f64>,
    Q: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let mut best = (f64::INFINITY, 0);
    for a in 0..model.n_controls() {
        let k = hamiltonian_k(model, a, mu, &p, &q, m)?;
        if k < best.0 {
            best = (k, a);
        }
    }
    Ok(best)
}

fn theta(t: f64, mu: ParticleMeasure) -> Result<ThetaPoint> {
    let d = mu.dim();
    ThetaPoint::new(t, DVector::zeros(d), mu)
}

/// The drift of `ψ(s, m_s)` at `(t, μ)` under constant control `a`:
/// `∂_tψ + ∫ b·D_μψ + ½Tr(D_{xμ}ψ σσᵀ) dμ + ½Tr(ℋψ σ̃σ̃ᵀ)`.
pub fn ito_generator(model: &FilterModel, psi: &MeasureFunctional, t: f64, mu: &ParticleMeasure, a: usize) -> Result<f64> {
    check_control(model, a)?;
    let missing = |s: &str| Error::InvalidParameter(format!("{} lacks a closed-form {s}", psi.name));
    let d_t = psi.d_t.as_ref().ok_or_else(|| missing("d_t"))?;
    let d_mu = psi.d_mu.as_ref().ok_or_else(|| missing("D_mu"))?;
    let d_x_mu = psi.d_x_mu.as_ref().ok_or_else(|| missing("D_xmu"))?;
    let hess = psi.hessian.as_ref().ok_or_else(|| missing("H"))?;
    let th = theta(t, mu.clone())?;
    let terms: Vec<f64> = mu
        .iter()
        .map(|(x, w)| {
            let s = model.sigma(x, a);
            w * (model.b(x, a).dot(&d_mu(&th, x)) + 0.5 * (d_x_mu(&th, x) * &s * s.transpose()).trace())
        })
        .collect();
    let st = model.sigma_tilde(a);
    Ok(d_t(&th) + pairwise_sum(&terms) + 0.5 * (hess(&th) * &st * st.transpose()).trace())
}

/// Tensor Gauss–Hermite rule for `N(0, I_n)`.
fn gh_tensor(n: usize, points: usize) -> Vec<(DVector<f64>, f64)> {
    let (x, w) = gauss_hermite_normal(points);
    let mut out = vec![(DVector::zeros(n), 1.0)];
    for i in 0..n {
        let mut next = Vec::with_capacity(out.len() * points);
        for (z, wz) in &out {
            for (xj, wj) in x.iter().zip(&w) {
                let mut z2: DVector<f64> = z.clone();
                z2[i] = *xj;
                next.push((z2, wz * wj));
            }
        }
        out = next;
    }
    out
}

/// `E[ψ(t+Δ, m_{t+Δ})]` for the Euler scheme with `substeps` steps, with
/// both noises integrated by tensor Gauss–Hermite rules. Each atom of `mu0`
/// is one particle and splits into weighted children at every substep.
pub fn quadrature_expectation(
    model: &FilterModel,
    psi: &MeasureFunctional,
    t: f64,
    mu0: &ParticleMeasure,
    a: usize,
    delta: f64,
    substeps: usize,
    gh_points: usize,
) -> Result<f64> {
    check_control(model, a)?;
    if substeps == 0 || !(delta > 0.0) {
        return Err(Error::InvalidParameter("need delta > 0 and at least one substep".into()));
    }
    let h = delta / substeps as f64;
    let sh = h.sqrt();
    let v_rule = if model.sigma.is_zero() { vec![(DVector::zeros(model.dim_v), 1.0)] } else { gh_tensor(model.dim_v, gh_points) };
    let w_rule = if model.sigma_tilde(a).iter().all(|v| *v == 0.0) {
        vec![(DVector::zeros(model.dim_w), 1.0)]
    } else {
        gh_tensor(model.dim_w, gh_points)
    };
    let st = model.sigma_tilde(a);

    fn rec(
        ctx: &(&FilterModel, &MeasureFunctional, usize, f64, f64, &[(DVector<f64>, f64)], &[(DVector<f64>, f64)], &DMatrix<f64>, f64),
        level: usize,
        pts: &[DVector<f64>],
        wts: &[f64],
        y: &DVector<f64>,
    ) -> f64 {
        let (model, psi, a, h, sh, v_rule, w_rule, st, t_end) = *ctx;
        if level == 0 {
            let shifted: Vec<DVector<f64>> = pts.iter().map(|x| x + y).collect();
            let mu = ParticleMeasure::new(shifted, wts.to_vec()).expect("quadrature weights sum to one");
            return psi.eval_parts(t_end, &DVector::zeros(y.len()), &mu);
        }
        let mut np = Vec::with_capacity(pts.len() * v_rule.len());
        let mut nw = Vec::with_capacity(pts.len() * v_rule.len());
        for (x, w) in pts.iter().zip(wts) {
            let at = x + y;
            let base = x + model.b(&at, a) * h;
            let s = model.sigma(&at, a);
            for (z, wz) in v_rule {
                np.push(&base + &s * z * sh);
                nw.push(w * wz);
            }
        }
        let total: f64 = nw.iter().sum();
        nw.iter_mut().for_each(|w| *w /= total);
        let vals: Vec<f64> = w_rule
            .iter()
            .map(|(xi, wx)| wx * rec(ctx, level - 1, &np, &nw, &(y + st * xi * sh)))
            .collect();
        pairwise_sum(&vals)
    }

    let ctx = (model, psi, a, h, sh, v_rule.as_slice(), w_rule.as_slice(), &st, t + delta);
    Ok(rec(&ctx, substeps, mu0.points(), mu0.weights(), &DVector::zeros(model.dim)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItoRow {
    pub delta: f64,
    pub expectation: f64,
    pub predicted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoReport {
    pub functional: String,
    pub generator: f64,
    pub rows: Vec<ItoRow>,
    /// Least-squares slope of `log residual` against `log Δ`; `None` when
    /// every residual is at rounding level.
    pub slope: Option<f64>,
    pub exact: bool,
}

/// One-step residuals `|E ψ(t+Δ, m_{t+Δ}) − ψ(t, μ) − Δ · generator|`.
pub fn ito_residual(
    model: &FilterModel,
    psi: &MeasureFunctional,
    t: f64,
    mu0: &ParticleMeasure,
    a: usize,
    deltas: &[f64],
    substeps: usize,
    gh_points: usize,
) -> Result<ItoReport> {
    if deltas.len() < 2 {
        return Err(Error::InvalidParameter("need at least two step sizes".into()));
    }
    let generator = ito_generator(model, psi, t, mu0, a)?;
    let base = psi.eval_parts(t, &DVector::zeros(model.dim), mu0);
    let rows: Vec<ItoRow> = deltas
        .iter()
        .map(|&delta| {
            let e = quadrature_expectation(model, psi, t, mu0, a, delta, substeps, gh_points)?;
            let predicted = base + delta * generator;
            Ok(ItoRow { delta, expectation: e, predicted, residual: (e - predicted).abs() })
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 + base.abs() + generator.abs();
    let exact = rows.iter().all(|r| r.residual <= 1e-13 * scale);
    let slope = if exact { None } else { Some(loglog_slope(&rows)) };
    Ok(ItoReport { functional: psi.name.clone(), generator, rows, slope, exact })
}

fn loglog_slope(rows: &[ItoRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.delta.ln(), r.residual.max(f64::MIN_POSITIVE).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItoRateReport {
    pub delta: f64,
    /// Monte-Carlo estimate of `(E ψ(t+Δ, m_{t+Δ}) − ψ(t, μ)) / Δ`.
    pub rate: Estimate,
    pub generator: f64,
    pub within_3se: bool,
}

/// Monte-Carlo rate of `ψ(s, m_s)` over `[t, t+Δ]` against its generator.
pub fn ito_mc_rate(
    model: &FilterModel,
    psi: &MeasureFunctional,
    t: f64,
    mu0: &ParticleMeasure,
    a: usize,
    delta: f64,
    mc: &McConfig,
) -> Result<ItoRateReport> {
    let generator = ito_generator(model, psi, t, mu0, a)?;
    let zero = DVector::zeros(model.dim);
    let base = psi.eval_parts(t, &zero, mu0);
    let state = ParticleState::new(mu0, mc.n_particles)?;
    let control = ControlPath::constant(t, t + delta, a);
    let samples: Vec<f64> = (0..mc.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let (end, _) = simulate_path(model, state.clone(), &control, mc.dt, path_seed(mc.seed, p), |_| {})?;
            Ok((psi.eval_parts(t + delta, &zero, &end.measure()) - base) / delta)
        })
        .collect::<Result<_>>()?;
    let rate = Estimate::from_samples(&samples);
    let within_3se = (rate.mean - generator).abs() <= (3.0 * rate.std_error).max(1e-12);
    Ok(ItoRateReport { delta, rate, generator, within_3se })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub offset: f64,
    pub w2_sq: Estimate,
    pub dual_sq: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowLipschitzReport {
    pub rows: Vec<FlowRow>,
    /// Mean over paths of the least-squares slope through the origin of
    /// `W₂²(m_s, μ)` against `s − t`.
    pub w2_slope: Estimate,
    pub dual_slope: Estimate,
    /// Slope of `E[W₂²] + E[‖m_s − μ‖²_λ]`.
    pub total_slope: Estimate,
    /// `R²` of an ordinary linear fit of the mean curves.
    pub w2_r2: f64,
    pub total_r2: f64,
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    1.0 - ss_res / syy
}

/// `E[W₂²(m_s, μ)]` and `E[‖m_s − μ‖²_λ]` at the offsets `s − t`, with path
/// `p` driven by the constant control `controls[p % len]`.
pub fn flow_lipschitz_check(
    model: &FilterModel,
    mu0: &ParticleMeasure,
    t: f64,
    controls: &[usize],
    offsets: &[f64],
    mc: &McConfig,
    grid: &QuadratureGrid,
) -> Result<FlowLipschitzReport> {
    if controls.is_empty() || offsets.is_empty() {
        return Err(Error::InvalidParameter("need at least one control and one offset".into()));
    }
    for &a in controls {
        check_control(model, a)?;
    }
    let ks: Vec<usize> = offsets
        .iter()
        .map(|&o| {
            let k = (o / mc.dt).round();
            if !(o > 0.0) || (k * mc.dt - o).abs() > 1e-9 * o.max(1.0) {
                Err(Error::InvalidParameter(format!("offset {o} is not a positive multiple of dt")))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<_>>()?;
    let k_max = *ks.iter().max().expect("nonempty");
    let state = ParticleState::new(mu0, mc.n_particles)?;
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..mc.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let control = ControlPath::constant(t, t + k_max as f64 * mc.dt, controls[p as usize % controls.len()]);
            let mut w2 = vec![f64::NAN; ks.len()];
            let mut dual = vec![f64::NAN; ks.len()];
            let mut err = None;
            simulate_path(model, state.clone(), &control, mc.dt, path_seed(mc.seed, p), |v| {
                for (i, &k) in ks.iter().enumerate() {
                    if v.k == k {
                        let m = v.state.measure();
                        match (mu0.w2(&m), dual_norm_lambda(&m, mu0, grid)) {
                            (Ok((w, _)), Ok(dn)) => {
                                w2[i] = w * w;
                                dual[i] = dn * dn;
                            }
                            (Err(e), _) | (_, Err(e)) => err = Some(e),
                        }
                    }
                }
            })?;
            match err {
                Some(e) => Err(e),
                None => Ok((w2, dual)),
            }
        })
        .collect::<Result<_>>()?;

    let column = |i: usize, which: usize| -> Vec<f64> {
        per_path.iter().map(|(a, b)| if which == 0 { a[i] } else { b[i] }).collect()
    };
    let rows: Vec<FlowRow> = offsets
        .iter()
        .enumerate()
        .map(|(i, &offset)| FlowRow {
            offset,
            w2_sq: Estimate::from_samples(&column(i, 0)),
            dual_sq: Estimate::from_samples(&column(i, 1)),
        })
        .collect();
    let sxx: f64 = offsets.iter().map(|o| o * o).sum();
    let slope_of = |v: &[f64]| -> f64 { offsets.iter().zip(v).map(|(o, y)| o * y).sum::<f64>() / sxx };
    let w2_slopes: Vec<f64> = per_path.iter().map(|(a, _)| slope_of(a)).collect();
    let dual_slopes: Vec<f64> = per_path.iter().map(|(_, b)| slope_of(b)).collect();
    let total_slopes: Vec<f64> = w2_slopes.iter().zip(&dual_slopes).map(|(a, b)| a + b).collect();
    let w2_means: Vec<f64> = rows.iter().map(|r| r.w2_sq.mean).collect();
    let total_means: Vec<f64> = rows.iter().map(|r| r.w2_sq.mean + r.dual_sq.mean).collect();
    Ok(FlowLipschitzReport {
        w2_r2: r_squared(offsets, &w2_means),
        total_r2: r_squared(offsets, &total_means),
        rows,
        w2_slope: Estimate::from_samples(&w2_slopes),
        dual_slope: Estimate::from_samples(&dual_slopes),
        total_slope: Estimate::from_samples(&total_slopes),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakResidualRow {
    pub test_function: String,
    /// Mean over steps and paths of
    /// `m_{s+dt}(h) − m_s(h) − m_s(L^a h) dt − m_s(M^a h)·ΔW`.
    pub per_step: Estimate,
    /// `per_step / dt`, which should be `O(dt)`.
    pub per_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakResidualReport {
    pub dt: f64,
    pub rows: Vec<WeakResidualRow>,
}

/// Discrete check of `dm_s(h) = m_s(L^a h)ds + m_s(M^a h)dW_s` for
/// `h(x) = x₁` and `h(x) = |x|²`, with
/// `L^a h = bᵀDh + ½Tr((σσᵀ + σ̃σ̃ᵀ)D²h)` and `M^a h = σ̃ᵀDh`.
pub fn weak_residual(model: &FilterModel, mu0: &ParticleMeasure, t: f64, a: usize, n_steps: usize, mc: &McConfig) -> Result<WeakResidualReport> {
    check_control(model, a)?;
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be positive".into()));
    }
    let st = model.sigma_tilde(a);
    let sst = &st * st.transpose();
    // Per test function: (h, L h, ∇h) at a point.
    let eval = |x: &DVector<f64>, which: usize| -> (f64, f64, DVector<f64>) {
        let b = model.b(x, a);
        let s = model.sigma(x, a);
        let tr = (&s * s.transpose() + &sst).trace();
        if which == 0 {
            let mut e = DVector::zeros(x.len());
            e[0] = 1.0;
            (x[0], b[0], e)
        } else {
            (x.norm_squared(), 2.0 * x.dot(&b) + tr, 2.0 * x)
        }
    };
    let state = ParticleState::new(mu0, mc.n_particles)?;
    let control = ControlPath::constant(t, t + n_steps as f64 * mc.dt, a);
    let per_path: Vec<[f64; 2]> = (0..mc.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut prev: Option<[(f64, f64, DVector<f64>); 2]> = None;
            let mut acc = [Vec::with_capacity(n_steps), Vec::with_capacity(n_steps)];
            simulate_path(model, state.clone(), &control, mc.dt, path_seed(mc.seed, p), |v| {
                let now: [(f64, f64, DVector<f64>); 2] = [0, 1].map(|which| {
                    let mut h = Vec::with_capacity(v.state.len());
                    let mut lh = Vec::with_capacity(v.state.len());
                    let mut mh = DVector::zeros(model.dim_w);
                    for (x, w) in v.state.tilde.iter().zip(&v.state.weights) {
                        let (hv, lv, g) = eval(&(x + &v.state.y), which);
                        h.push(w * hv);
                        lh.push(w * lv);
                        mh += *w * st.transpose() * g;
                    }
                    (pairwise_sum(&h), pairwise_sum(&lh), mh)
                });
                if let (Some(pr), Some(dw)) = (&prev, v.last_dw) {
                    for which in 0..2 {
                        let (h0, l0, m0) = &pr[which];
                        acc[which].push(now[which].0 - h0 - l0 * mc.dt - m0.dot(dw));
                    }
                }
                prev = Some(now);
            })?;
            Ok([pairwise_sum(&acc[0]) / n_steps as f64, pairwise_sum(&acc[1]) / n_steps as f64])
        })
        .collect::<Result<_>>()?;
    let rows = ["x1", "|x|^2"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let v: Vec<f64> = per_path.iter().map(|r| r[i]).collect();
            let per_step = Estimate::from_samples(&v);
            WeakResidualRow { test_function: name.to_string(), per_dt: per_step.mean / mc.dt, per_step }
        })
        .collect();
    Ok(WeakResidualReport { dt: mc.dt, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::model::{DriftFamily, DriftSpec, RunningCost, SigmaSpec};

    fn mu0() -> ParticleMeasure {
        ParticleMeasure::from_pairs_1d(&[(-0.5, 0.5), (0.4, 0.5)]).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let mut model = FilterModel::sigma_tilde_only(vec![vec![0.0]], 1.0);
        let zero_p = |x: &DVector<f64>| DVector::zeros(x.len());
        let zero_q = |x: &DVector<f64>| DMatrix::zeros(x.len(), x.len());
        let m0 = DMatrix::zeros(1, 1);
        assert_eq!(hamiltonian_k(&model, 0, &mu0(), zero_p, zero_q, &m0).unwrap(), 0.0);

        // μ = δ₀, b(0, a) = β, p(x) = x, f(0, a) = φ.
        model.drift = DriftSpec { family: DriftFamily::Constant { c: vec![0.7] }, control_gain: None };
        model.running_cost = RunningCost::Control { linear: vec![1.0], quadratic: 0.0 };
        model.controls = vec![vec![0.35]];
        model.sigma_tilde = SigmaSpec::Constant { matrix: vec![vec![0.6]] };
        let dirac = ParticleMeasure::dirac(DVector::zeros(1));
        let m = DMatrix::from_element(1, 1, 2.0);
        let k = hamiltonian_k(&model, 0, &dirac, |x| x.clone(), zero_q, &m).unwrap();
        assert!((k - (0.35 + 0.5 * 0.36 * 2.0)).abs() < 1e-15);

        // M = I, σ̃ a column vector v: last term ½|v|².
        let mut m2 = FilterModel::sigma_tilde_only(vec![vec![0.3], vec![0.4]], 1.0);
        m2.dim_v = 1;
        let mu2 = ParticleMeasure::dirac(DVector::zeros(2));
        let k = hamiltonian_k(&m2, 0, &mu2, zero_p, zero_q, &DMatrix::identity(2, 2)).unwrap();
        assert!((k - 0.125).abs() < 1e-15);
    }

    #[test]
    fn gh_tensor_moments() {
        let r = gh_tensor(2, 3);
        assert_eq!(r.len(), 9);
        let m2: f64 = r.iter().map(|(z, w)| w * z[0] * z[0]).sum();
        let cross: f64 = r.iter().map(|(z, w)| w * z[0] * z[1]).sum();
        assert!((m2 - 1.0).abs() < 1e-14);
        assert!(cross.abs() < 1e-14);
    }

    #[test]
    fn linear_mean_is_exact() {
        let mut model = FilterModel::sigma_tilde_only(vec![vec![0.5]], 1.0);
        model.drift = DriftSpec { family: DriftFamily::Constant { c: vec![0.3] }, control_gain: None };
        let psi = MeasureFunctional::mean_coordinate(0);
        let rep = ito_residual(&model, &psi, 0.0, &mu0(), 0, &[0.1, 0.05], 1, 3).unwrap();
        assert!(rep.exact, "{rep:?}");
        assert!((rep.generator - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mean_square_grows_at_trace_rate() {
        let model = FilterModel::sigma_tilde_only(vec![vec![0.5]], 1.0);
        let psi = MeasureFunctional::mean_norm_sq();
        let g = ito_generator(&model, &psi, 0.0, &mu0(), 0).unwrap();
        assert!((g - 0.25).abs() < 1e-15);
        let e = quadrature_expectation(&model, &psi, 0.0, &mu0(), 0, 0.1, 2, 3).unwrap();
        let base = mu0().mean()[0].powi(2);
        assert!((e - base - 0.025).abs() < 1e-15);
    }

    #[test]
    fn static_model_has_zero_flow_moments() {
        let mut model = FilterModel::sigma_tilde_only(vec![vec![0.0]], 1.0);
        model.sigma_tilde = SigmaSpec::Zero;
        let grid = crate::fourier::build_grid(1, 8, 3).unwrap();
        let rep = flow_lipschitz_check(&model, &mu0(), 0.0, &[0], &[0.1, 0.2], &McConfig::new(5, 2, 0.05, 1), &grid).unwrap();
        for r in &rep.rows {
            assert!(r.w2_sq.mean.abs() < 1e-15 && r.dual_sq.mean.abs() < 1e-15);
        }
    }

    #[test]
    fn weak_residual_for_first_moment_is_pure_noise() {
        let model = FilterModel::example_gaussian_decay();
        let rep = weak_residual(&model, &mu0(), 0.0, 1, 20, &McConfig::new(200, 8, 0.01, 2)).unwrap();
        let r = &rep.rows[0];
        assert!(r.per_step.mean.abs() <= 4.0 * r.per_step.std_error + 1e-15, "{r:?}");
    }
}
