//! Matrix sandwich checks, jet assembly at doubled points and a finite
//! doubling-of-variables experiment.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{dmu_psi_raw, dmu_psi_tilde_raw, dxmu_psi, dxmu_psi_tilde, is_symmetric, Jet, MeasureFunctional, PsiAnchors};
use crate::error::{Error, Result};
use crate::fourier::{QuadratureGrid, SpectralSummary, ThetaPoint};
use crate::gauge::{d_sigma_squared, perturbed_maximize_indexed, Certificate, GaugeParams};
use crate::measures::ParticleMeasure;

/// Tolerance on the smallest eigenvalue in [`check_sandwich`].
pub const PSD_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;

/// Which pair of bounds to test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandwichMode {
    /// `−(1/ε + 2α) I ≤ diag(X, X̃) ≤ (α + 2εα²) J`.
    Ishii,
    /// `−(3/ε) I ≤ diag(X, X̃) ≤ (3/ε) J`.
    Comparison,
}

/// `X, X̃` of size `2d × 2d`, ordered as `(y, measure)` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichInstance {
    pub x: DMatrix<f64>,
    pub x_tilde: DMatrix<f64>,
    pub alpha: f64,
    pub epsilon: f64,
}

impl SandwichInstance {
    pub fn new(x: DMatrix<f64>, x_tilde: DMatrix<f64>, alpha: f64, epsilon: f64) -> Result<Self> {
        let inst = Self { x, x_tilde, alpha, epsilon };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("alpha and epsilon must be positive".into()));
        }
        let n = self.x.nrows();
        if n == 0 || n % 2 != 0 || self.x_tilde.shape() != (n, n) || self.x.ncols() != n {
            return Err(Error::InvalidParameter(format!(
                "X and X~ must both be 2d x 2d, got {:?} and {:?}",
                self.x.shape(),
                self.x_tilde.shape()
            )));
        }
        for m in [&self.x, &self.x_tilde] {
            if !is_symmetric(m, SYMMETRY_TOL) {
                return Err(Error::NotSymmetric((m - m.transpose()).amax()));
            }
        }
        Ok(())
    }

    /// `d`, the state dimension.
    pub fn dim(&self) -> usize {
        self.x.nrows() / 2
    }

    /// `(lower constant c, upper constant R)` with `−cI ≤ diag ≤ R J`.
    pub fn constants(&self, mode: SandwichMode) -> (f64, f64) {
        let (a, e) = (self.alpha, self.epsilon);
        match mode {
            SandwichMode::Ishii => (1.0 / e + 2.0 * a, a + 2.0 * e * a * a),
            SandwichMode::Comparison => (3.0 / e, 3.0 / e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandwichStatus {
    Satisfied,
    LeftViolation,
    RightViolation,
    /// Both inequalities fail.
    BothViolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub status: SandwichStatus,
    /// `λ_min(diag(X, X̃) + cI)`.
    pub left_margin: f64,
    /// `λ_min(R J − diag(X, X̃))`.
    pub right_margin: f64,
}

/// `(I −I; −I I)` with `I = I_{2d}`.
pub fn coupling_block(dim: usize) -> DMatrix<f64> {
    let n = 2 * dim;
    DMatrix::from_fn(2 * n, 2 * n, |i, j| {
        if i % n != j % n {
            0.0
        } else if (i < n) == (j < n) {
            1.0
        } else {
            -1.0
        }
    })
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((n, n), (m, m)).copy_from(b);
    out
}

fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn check_sandwich(inst: &SandwichInstance, mode: SandwichMode) -> Result<SandwichReport> {
    inst.validate()?;
    let (c, r) = inst.constants(mode);
    let diag = block_diag(&inst.x, &inst.x_tilde);
    let n = diag.nrows();
    let left_margin = min_eigenvalue(&diag + c * DMatrix::identity(n, n));
    let right_margin = min_eigenvalue(r * coupling_block(inst.dim()) - &diag);
    let status = match (left_margin >= -PSD_TOL, right_margin >= -PSD_TOL) {
        (true, true) => SandwichStatus::Satisfied,
        (false, true) => SandwichStatus::LeftViolation,
        (true, false) => SandwichStatus::RightViolation,
        (false, false) => SandwichStatus::BothViolated,
    };
    Ok(SandwichReport { status, left_margin, right_margin })
}

/// Splits a `2d × 2d` matrix into `(X¹¹, X¹², X²²)`.
pub fn split_blocks(x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = x.nrows() / 2;
    (
        x.view((0, 0), (d, d)).into_owned(),
        x.view((0, d), (d, d)).into_owned(),
        x.view((d, d), (d, d)).into_owned(),
    )
}

/// The super-jet of `u` at `θ*` and the sub-jet of `v` at `θ̃*` produced at a
/// doubled maximum, built from the closed forms of `Ψ` and `Ψ̃`.
pub fn assemble_jets(
    alpha: f64,
    theta_star: &ThetaPoint,
    theta_tilde_star: &ThetaPoint,
    x: &DMatrix<f64>,
    x_tilde: &DMatrix<f64>,
    grid: &Arc<QuadratureGrid>,
) -> Result<(Jet, Jet)> {
    let d = theta_star.dim();
    if theta_tilde_star.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta_tilde_star.dim() });
    }
    // Validates shapes and symmetry; ε plays no role here.
    SandwichInstance::new(x.clone(), x_tilde.clone(), alpha, 1.0)?;
    if x.nrows() != 2 * d {
        return Err(Error::DimensionMismatch { expected: 2 * d, got: x.nrows() / 2 });
    }
    let anchors = Arc::new(PsiAnchors::new(&theta_star.mu, &theta_tilde_star.mu, grid)?);
    let b = alpha * (theta_star.t - theta_tilde_star.t);
    let p = alpha * (&theta_star.y - &theta_tilde_star.y);
    let dm = alpha * (anchors.star.mean.clone() - &anchors.tilde_star.mean);

    let (x11, x12, x22) = split_blocks(x);
    let (a1, g1, dm1) = (anchors.clone(), grid.clone(), dm.clone());
    let f_plus = Arc::new(move |z: &DVector<f64>| &dm1 + 0.5 * alpha * dmu_psi_raw(&a1.star, &a1, z, &g1));
    let (a2, g2) = (anchors.clone(), grid.clone());
    let g_plus = Arc::new(move |z: &DVector<f64>| 0.5 * alpha * dxmu_psi(&a2, z, &g2));
    let plus = Jet::new(b, p.clone(), x11, f_plus, g_plus, x12, x22)?;

    let (t11, t12, t22) = split_blocks(x_tilde);
    let (a3, g3) = (anchors.clone(), grid.clone());
    let f_minus = Arc::new(move |z: &DVector<f64>| &dm - 0.5 * alpha * dmu_psi_tilde_raw(&a3.tilde_star, &a3, z, &g3));
    let (a4, g4) = (anchors, grid.clone());
    let g_minus = Arc::new(move |z: &DVector<f64>| -0.5 * alpha * dxmu_psi_tilde(&a4, z, &g4));
    let minus = Jet::new(b, p, -t11, f_minus, g_minus, -t12, -t22)?;
    Ok((plus, minus))
}

/// Every `ThetaPoint` in `ts × ys × mus`, in lexicographic order.
pub fn product_candidates(ts: &[f64], ys: &[DVector<f64>], mus: &[ParticleMeasure]) -> Result<Vec<ThetaPoint>> {
    let mut out = Vec::with_capacity(ts.len() * ys.len() * mus.len());
    for &t in ts {
        for y in ys {
            for mu in mus {
                out.push(ThetaPoint::new(t, y.clone(), mu.clone())?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingConfig {
    pub alpha: f64,
    pub kappa: f64,
    /// Perturbation weight; defaults to `√κ`.
    pub delta: Option<f64>,
    pub gauge: GaugeParams,
}

impl DoublingConfig {
    pub fn new(alpha: f64, kappa: f64, dim: usize) -> Self {
        Self { alpha, kappa, delta: None, gauge: GaugeParams::default_for(dim) }
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or_else(|| self.kappa.sqrt())
    }
}

/// Observed left side and right side of
/// `√(|y*−ỹ*|² + ρ_F²(μ*, μ̃*))/ε ≤ L + √(2L² + 2κ/ε)`, `ε = 1/α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriBound {
    pub lipschitz: f64,
    pub observed: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingReport {
    pub n_candidates: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub delta: f64,
    /// Exhaustive maximizer `(i, j)` of `u(θ_i) − v(θ_j) − (α/2) d_F²`.
    pub argmax: (usize, usize),
    pub max_value: f64,
    pub diagonal_max: f64,
    pub d_f_at_argmax: f64,
    /// `d_F(θ*, θ̃*) ≤ 10 √(gap/α)` with `gap = max − diagonal max`.
    pub diagonal_check: bool,
    pub perturbed: (usize, usize),
    pub perturbed_value: f64,
    pub certificate: Certificate,
    pub apriori: AprioriBound,
}

/// Largest `|v(θ_a) − v(θ_b)| / √(|y_a − y_b|² + ρ_F²(μ_a, μ_b))` over pairs of
/// candidates sharing the same time.
pub fn empirical_lipschitz(values: &[f64], candidates: &[ThetaPoint], summaries: &[SpectralSummary], grid: &QuadratureGrid) -> f64 {
    let n = candidates.len();
    (0..n)
        .into_par_iter()
        .map(|a| {
            let mut best: f64 = 0.0;
            for b in (a + 1)..n {
                if candidates[a].t != candidates[b].t {
                    continue;
                }
                let r2 = (&candidates[a].y - &candidates[b].y).norm_squared()
                    + crate::fourier::rho_f_parts_from(&summaries[a], &summaries[b], grid).total_sq();
                if r2 > 1e-28 {
                    best = best.max((values[a] - values[b]).abs() / r2.sqrt());
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

/// Maximizes `u(θ) − v(θ̃) − (α/2)d_F²(θ, θ̃)` over all candidate pairs, then
/// perturbs it into a strict maximizer and evaluates the a-priori bound.
///
/// The bound compares the maximizer with `(θ*, (t̃*, y*, μ*))`, so it is only
/// meaningful when the candidates form a product grid.
pub fn doubling_experiment(
    u: &MeasureFunctional,
    v: &MeasureFunctional,
    candidates: &[ThetaPoint],
    grid: &QuadratureGrid,
    cfg: &DoublingConfig,
) -> Result<DoublingReport> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(cfg.alpha > 0.0 && cfg.kappa > 0.0) {
        return Err(Error::InvalidParameter("alpha and kappa must be positive".into()));
    }
    let n = candidates.len();
    let summaries: Vec<SpectralSummary> = candidates.par_iter().map(|c| SpectralSummary::new(&c.mu, grid)).collect();
    let uv: Vec<f64> = candidates.par_iter().map(|c| u.eval(c)).collect();
    let vv: Vec<f64> = candidates.par_iter().map(|c| v.eval(c)).collect();
    let d2 = |i: usize, j: usize| -> f64 {
        let (a, b) = (&candidates[i], &candidates[j]);
        (a.t - b.t).powi(2)
            + (&a.y - &b.y).norm_squared()
            + crate::fourier::rho_f_parts_from(&summaries[i], &summaries[j], grid).total_sq()
    };
    let pair_dist: Vec<f64> = (0..n * n).into_par_iter().map(|p| d2(p / n, p % n)).collect();
    let values: Vec<f64> = (0..n * n).map(|p| uv[p / n] - vv[p % n] - 0.5 * cfg.alpha * pair_dist[p]).collect();

    let mut best = 0;
    for (p, &val) in values.iter().enumerate() {
        if val > values[best] {
            best = p;
        }
    }
    let argmax = (best / n, best % n);
    let max_value = values[best];
    let diagonal_max = (0..n).map(|i| values[i * n + i]).fold(f64::NEG_INFINITY, f64::max);
    let gap = (max_value - diagonal_max).max(0.0);
    let d_f_at_argmax = pair_dist[best].sqrt();
    let diagonal_check = d_f_at_argmax <= 10.0 * (gap / cfg.alpha).sqrt() + 1e-12;

    let cache: Mutex<HashMap<(usize, usize), f64>> = Mutex::new(HashMap::new());
    let ds2 = |i: usize, j: usize| -> Result<f64> {
        if i == j {
            return Ok(0.0);
        }
        let key = (i.min(j), i.max(j));
        if let Some(v) = cache.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let v = d_sigma_squared(&candidates[i], &candidates[j], &cfg.gauge)?;
        cache.lock().unwrap().insert(key, v);
        Ok(v)
    };
    let delta = cfg.delta();
    let (p, certificate) = perturbed_maximize_indexed(
        &values,
        |a, b| Ok(ds2(a / n, b / n)? + ds2(a % n, b % n)?),
        delta,
        cfg.kappa,
    )?;
    let perturbed = (p / n, p % n);

    let lipschitz = empirical_lipschitz(&vv, candidates, &summaries, grid);
    let (s, st) = (&candidates[perturbed.0], &candidates[perturbed.1]);
    let eps = 1.0 / cfg.alpha;
    let observed = ((&s.y - &st.y).norm_squared()
        + crate::fourier::rho_f_parts_from(&summaries[perturbed.0], &summaries[perturbed.1], grid).total_sq())
    .sqrt()
        / eps;
    let bound = lipschitz + (2.0 * lipschitz * lipschitz + 2.0 * cfg.kappa / eps).sqrt();

    Ok(DoublingReport {
        n_candidates: n,
        alpha: cfg.alpha,
        kappa: cfg.kappa,
        delta,
        argmax,
        max_value,
        diagonal_max,
        d_f_at_argmax,
        diagonal_check,
        perturbed,
        perturbed_value: values[p],
        certificate,
        apriori: AprioriBound { lipschitz, observed, bound, holds: observed <= bound * (1.0 + 1e-12) },
    })
}
