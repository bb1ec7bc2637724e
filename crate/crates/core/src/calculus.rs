//! Lions derivatives on particle measures.
//!
//! Closed forms for `ρ_F²`, the auxiliary `𝓛` and the `Ψ`, `Ψ̃` functions,
//! finite-difference oracles along push-forward directions and translations,
//! and jets assembled either way.
//!
//! Matrix conventions: `D_{xμ}u(μ,x)[a][b] = ∂_{x_b} D_μu(μ,x)_a`, and the
//! cross derivative `𝓓²_{yμ}u[a][b] = ∂_{z_a}∂_{y_b} u(t, y, (I+z)_♯μ)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{basis_fn, rho_f_squared, QuadratureGrid, SpectralSummary, ThetaPoint};
use crate::measures::ParticleMeasure;
use crate::samples::{random_measure, RandomField};

/// Default base step for every finite-difference oracle.
pub const DEFAULT_STEP: f64 = 1e-3;

pub type EvalFn = Arc<dyn Fn(f64, &DVector<f64>, &ParticleMeasure) -> f64 + Send + Sync>;
pub type ScalarAt = Arc<dyn Fn(&ThetaPoint) -> f64 + Send + Sync>;
pub type VectorAt = Arc<dyn Fn(&ThetaPoint) -> DVector<f64> + Send + Sync>;
pub type MatrixAt = Arc<dyn Fn(&ThetaPoint) -> DMatrix<f64> + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&ThetaPoint, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&ThetaPoint, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Declared bound `sup_x |D_μu(μ,x)| / (1+|x|²)`. Metadata only: a supremum
/// over `ℝ^d` cannot be checked numerically.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GrowthTag {
    pub quadratic_bound: Option<f64>,
}

/// A function `u(t, y, μ)` with optional closed-form derivatives.
#[derive(Clone)]
pub struct MeasureFunctional {
    pub name: String,
    eval: EvalFn,
    pub d_t: Option<ScalarAt>,
    pub d_y: Option<VectorAt>,
    pub d_yy: Option<MatrixAt>,
    pub d_mu: Option<VectorField>,
    pub d_x_mu: Option<MatrixField>,
    pub d_y_mu: Option<MatrixAt>,
    pub hessian: Option<MatrixAt>,
    pub growth: GrowthTag,
}

impl fmt::Debug for MeasureFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasureFunctional").field("name", &self.name).finish_non_exhaustive()
    }
}

fn add_opt<A: ?Sized>(a: &Option<Arc<A>>, b: &Option<Arc<A>>, join: impl Fn(Arc<A>, Arc<A>) -> Arc<A>) -> Option<Arc<A>> {
    match (a, b) {
        (Some(x), Some(y)) => Some(join(x.clone(), y.clone())),
        _ => None,
    }
}

impl MeasureFunctional {
    pub fn new<F>(name: impl Into<String>, eval: F) -> Self
    where
        F: Fn(f64, &DVector<f64>, &ParticleMeasure) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            eval: Arc::new(eval),
            d_t: None,
            d_y: None,
            d_yy: None,
            d_mu: None,
            d_x_mu: None,
            d_y_mu: None,
            hessian: None,
            growth: GrowthTag::default(),
        }
    }

    /// A functional of the measure alone.
    pub fn of_measure<F>(name: impl Into<String>, eval: F) -> Self
    where
        F: Fn(&ParticleMeasure) -> f64 + Send + Sync + 'static,
    {
        Self::new(name, move |_, _, mu| eval(mu))
    }

    pub fn eval(&self, theta: &ThetaPoint) -> f64 {
        (self.eval)(theta.t, &theta.y, &theta.mu)
    }

    pub fn eval_parts(&self, t: f64, y: &DVector<f64>, mu: &ParticleMeasure) -> f64 {
        (self.eval)(t, y, mu)
    }

    /// Fills every time/space slot with zeros (`u` depends on μ alone).
    pub fn measure_only(mut self) -> Self {
        self.d_t = Some(Arc::new(|_| 0.0));
        self.d_y = Some(Arc::new(|th| DVector::zeros(th.y.len())));
        self.d_yy = Some(Arc::new(|th| DMatrix::zeros(th.y.len(), th.y.len())));
        self.d_y_mu = Some(Arc::new(|th| DMatrix::zeros(th.y.len(), th.y.len())));
        self
    }

    pub fn with_d_mu<F>(mut self, f: F) -> Self
    where
        F: Fn(&ThetaPoint, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        self.d_mu = Some(Arc::new(f));
        self
    }

    pub fn with_d_x_mu<F>(mut self, f: F) -> Self
    where
        F: Fn(&ThetaPoint, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.d_x_mu = Some(Arc::new(f));
        self
    }

    pub fn with_hessian<F>(mut self, f: F) -> Self
    where
        F: Fn(&ThetaPoint) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.hessian = Some(Arc::new(f));
        self
    }

    pub fn with_growth(mut self, bound: f64) -> Self {
        self.growth = GrowthTag { quadratic_bound: Some(bound) };
        self
    }

    /// `u + v`, keeping a closed form only where both summands have one.
    pub fn plus(&self, other: &Self) -> Self {
        let (e1, e2) = (self.eval.clone(), other.eval.clone());
        Self {
            name: format!("{}+{}", self.name, other.name),
            eval: Arc::new(move |t, y, mu| e1(t, y, mu) + e2(t, y, mu)),
            d_t: add_opt(&self.d_t, &other.d_t, |a, b| Arc::new(move |th| a(th) + b(th))),
            d_y: add_opt(&self.d_y, &other.d_y, |a, b| Arc::new(move |th| a(th) + b(th))),
            d_yy: add_opt(&self.d_yy, &other.d_yy, |a, b| Arc::new(move |th| a(th) + b(th))),
            d_mu: add_opt(&self.d_mu, &other.d_mu, |a, b| Arc::new(move |th, x| a(th, x) + b(th, x))),
            d_x_mu: add_opt(&self.d_x_mu, &other.d_x_mu, |a, b| Arc::new(move |th, x| a(th, x) + b(th, x))),
            d_y_mu: add_opt(&self.d_y_mu, &other.d_y_mu, |a, b| Arc::new(move |th| a(th) + b(th))),
            hessian: add_opt(&self.hessian, &other.hessian, |a, b| Arc::new(move |th| a(th) + b(th))),
            growth: GrowthTag {
                quadratic_bound: match (self.growth.quadratic_bound, other.growth.quadratic_bound) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                },
            },
        }
    }

    /// Constant `c`.
    pub fn constant(c: f64) -> Self {
        Self::of_measure("const", move |_| c)
            .measure_only()
            .with_d_mu(|th, _| DVector::zeros(th.dim()))
            .with_d_x_mu(|th, _| DMatrix::zeros(th.dim(), th.dim()))
            .with_hessian(|th| DMatrix::zeros(th.dim(), th.dim()))
            .with_growth(0.0)
    }

    /// `m(μ)_i`.
    pub fn mean_coordinate(i: usize) -> Self {
        Self::of_measure(format!("m{i}"), move |mu| mu.mean()[i])
            .measure_only()
            .with_d_mu(move |th, _| {
                let mut e = DVector::zeros(th.dim());
                e[i] = 1.0;
                e
            })
            .with_d_x_mu(|th, _| DMatrix::zeros(th.dim(), th.dim()))
            .with_hessian(|th| DMatrix::zeros(th.dim(), th.dim()))
            .with_growth(1.0)
    }

    /// `|m(μ)|²`, with `ℋ = 2I`.
    pub fn mean_norm_sq() -> Self {
        Self::of_measure("|m|^2", |mu| mu.mean().norm_squared())
            .measure_only()
            .with_d_mu(|th, _| 2.0 * th.mu.mean())
            .with_d_x_mu(|th, _| DMatrix::zeros(th.dim(), th.dim()))
            .with_hessian(|th| 2.0 * DMatrix::identity(th.dim(), th.dim()))
    }

    /// `∫ φ dμ` with gradient and Hessian of `φ` supplied.
    pub fn linear<P, G, H>(name: impl Into<String>, phi: P, grad: G, hess: H) -> Self
    where
        P: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        let hess = Arc::new(hess);
        let h2 = hess.clone();
        Self::of_measure(name, move |mu| {
            let v: Vec<f64> = mu.iter().map(|(x, w)| w * phi(x)).collect();
            crate::reduce::pairwise_sum(&v)
        })
        .measure_only()
        .with_d_mu(move |_, x| grad(x))
        .with_d_x_mu(move |_, x| hess(x))
        .with_hessian(move |th| {
            let d = th.dim();
            th.mu.iter().fold(DMatrix::zeros(d, d), |acc, (x, w)| acc + w * h2(x))
        })
    }

    /// `ρ_F²(μ, ν)` with `ν` frozen.
    pub fn rho_f2_to(nu: ParticleMeasure, grid: Arc<QuadratureGrid>) -> Self {
        let target = Arc::new(SpectralSummary::new(&nu, &grid));
        let (g1, g2, g3) = (grid.clone(), grid.clone(), grid.clone());
        let (t1, t2, t3) = (target.clone(), target.clone(), target);
        Self::of_measure("rho_F^2", move |mu| {
            crate::fourier::rho_f_parts_from(&SpectralSummary::new(mu, &g1), &t1, &g1).total_sq()
        })
        .measure_only()
        .with_d_mu(move |th, x| dmu_rho_f2_from(&SpectralSummary::new(&th.mu, &g2), &t2, x, &g2))
        .with_d_x_mu(move |th, x| dxmu_rho_f2_from(&SpectralSummary::new(&th.mu, &g3), &t3, x, &g3))
        .with_hessian(|th| 2.0 * DMatrix::identity(th.dim(), th.dim()))
    }

    /// `d_F²(θ, θ̃)` with `θ̃` frozen: `ℋ = 2I` and `𝓓²_{yμ} = 0`.
    pub fn d_f2_to(target: ThetaPoint, grid: Arc<QuadratureGrid>) -> Self {
        let rho = Self::rho_f2_to(target.mu.clone(), grid);
        let rho_eval = rho.eval.clone();
        let (tt, ty) = (target.t, target.y.clone());
        let ty2 = ty.clone();
        Self {
            name: "d_F^2".into(),
            eval: Arc::new(move |t, y, mu| (t - tt).powi(2) + (y - &ty).norm_squared() + rho_eval(t, y, mu)),
            d_t: Some(Arc::new(move |th| 2.0 * (th.t - tt))),
            d_y: Some(Arc::new(move |th| 2.0 * (&th.y - &ty2))),
            d_yy: Some(Arc::new(|th| 2.0 * DMatrix::identity(th.dim(), th.dim()))),
            d_y_mu: Some(Arc::new(|th| DMatrix::zeros(th.dim(), th.dim()))),
            ..rho
        }
    }

    /// `yᵀ m(μ)`: `D_μ = y`, `𝓓²_{yμ} = I`.
    pub fn y_dot_mean() -> Self {
        let mut u = Self::new("y.m", |_, y, mu| y.dot(&mu.mean()))
            .with_d_mu(|th, _| th.y.clone())
            .with_d_x_mu(|th, _| DMatrix::zeros(th.dim(), th.dim()))
            .with_hessian(|th| DMatrix::zeros(th.dim(), th.dim()));
        u.d_t = Some(Arc::new(|_| 0.0));
        u.d_y = Some(Arc::new(|th| th.mu.mean()));
        u.d_yy = Some(Arc::new(|th| DMatrix::zeros(th.dim(), th.dim())));
        u.d_y_mu = Some(Arc::new(|th| DMatrix::identity(th.dim(), th.dim())));
        u
    }

    /// `c t² + |y|²/2`.
    pub fn time_space_poly(c: f64) -> Self {
        let mut u = Self::new("ct^2+|y|^2/2", move |t, y, _| c * t * t + 0.5 * y.norm_squared())
            .with_d_mu(|th, _| DVector::zeros(th.dim()))
            .with_d_x_mu(|th, _| DMatrix::zeros(th.dim(), th.dim()))
            .with_hessian(|th| DMatrix::zeros(th.dim(), th.dim()));
        u.d_t = Some(Arc::new(move |th| 2.0 * c * th.t));
        u.d_y = Some(Arc::new(|th| th.y.clone()));
        u.d_yy = Some(Arc::new(|th| DMatrix::identity(th.dim(), th.dim())));
        u.d_y_mu = Some(Arc::new(|th| DMatrix::zeros(th.dim(), th.dim())));
        u
    }
}

// ---------------------------------------------------------------------------
// Closed forms

/// `Σ_j q_j k_j Im(c_j)`, i.e. `∫ Re(i k c̄…)`-type integrals reduce to this.
fn weighted_k_im(grid: &QuadratureGrid, c: impl Fn(usize) -> Complex64) -> DVector<f64> {
    let d = grid.dim;
    let mut acc = DVector::zeros(d);
    for (j, (k, q)) in grid.nodes.iter().zip(&grid.weights).enumerate() {
        acc += (q * c(j).im) * k;
    }
    acc
}

fn weighted_kk_re(grid: &QuadratureGrid, c: impl Fn(usize) -> Complex64) -> DMatrix<f64> {
    let d = grid.dim;
    let mut acc = DMatrix::zeros(d, d);
    for (j, (k, q)) in grid.nodes.iter().zip(&grid.weights).enumerate() {
        acc += (q * c(j).re) * (k * k.transpose());
    }
    acc
}

/// `2∫ Re(i k (F_k(S₀μ) − f_k(x − m(μ))) D_k^*) (1+|k|²)^{−λ} dk` for a
/// difference table `D_k`.
pub fn fourier_gradient_term(a: &SpectralSummary, diff: &[Complex64], x: &DVector<f64>, grid: &QuadratureGrid) -> DVector<f64> {
    let xc = x - &a.mean;
    // Re(i k w) = −k Im(w)
    -2.0 * weighted_k_im(grid, |j| (a.centered[j] - basis_fn(&grid.nodes[j], &xc)) * diff[j].conj())
}

/// `−2∫ k kᵀ Re(f_k(x − m(μ)) D_k^*) (1+|k|²)^{−λ} dk`.
pub fn fourier_hessian_term(a: &SpectralSummary, diff: &[Complex64], x: &DVector<f64>, grid: &QuadratureGrid) -> DMatrix<f64> {
    let xc = x - &a.mean;
    -2.0 * weighted_kk_re(grid, |j| basis_fn(&grid.nodes[j], &xc) * diff[j].conj())
}

fn table_diff(a: &SpectralSummary, b: &SpectralSummary) -> Vec<Complex64> {
    a.centered.iter().zip(&b.centered).map(|(x, y)| x - y).collect()
}

pub fn dmu_rho_f2_from(a: &SpectralSummary, b: &SpectralSummary, x: &DVector<f64>, grid: &QuadratureGrid) -> DVector<f64> {
    let dv = &a.cov - &b.cov;
    2.0 * (&a.mean - &b.mean) + 4.0 * &dv * (x - &a.mean) + fourier_gradient_term(a, &table_diff(a, b), x, grid)
}

pub fn dxmu_rho_f2_from(a: &SpectralSummary, b: &SpectralSummary, x: &DVector<f64>, grid: &QuadratureGrid) -> DMatrix<f64> {
    4.0 * (&a.cov - &b.cov) + fourier_hessian_term(a, &table_diff(a, b), x, grid)
}

fn check_same_dim(mus: &[&ParticleMeasure], grid: &QuadratureGrid) -> Result<()> {
    for mu in mus {
        if mu.dim() != grid.dim {
            return Err(Error::DimensionMismatch { expected: grid.dim, got: mu.dim() });
        }
    }
    Ok(())
}

/// `D_μ ρ_F²(μ, ν, x)`.
pub fn dmu_rho_f2(mu: &ParticleMeasure, nu: &ParticleMeasure, x: &DVector<f64>, grid: &QuadratureGrid) -> Result<DVector<f64>> {
    check_same_dim(&[mu, nu], grid)?;
    Ok(dmu_rho_f2_from(&SpectralSummary::new(mu, grid), &SpectralSummary::new(nu, grid), x, grid))
}

/// `D_{xμ} ρ_F²(μ, ν, x)`.
pub fn dxmu_rho_f2(mu: &ParticleMeasure, nu: &ParticleMeasure, x: &DVector<f64>, grid: &QuadratureGrid) -> Result<DMatrix<f64>> {
    check_same_dim(&[mu, nu], grid)?;
    Ok(dxmu_rho_f2_from(&SpectralSummary::new(mu, grid), &SpectralSummary::new(nu, grid), x, grid))
}

/// `𝓛(μ,η,ν) = 2Tr(V(S₀μ)ᵀ(V(S₀η) − V(S₀ν))) + 2∫ Re(F_k(S₀μ)(F_k(S₀η) − F_k(S₀ν))^*) dk_λ`.
pub fn script_l_from(a: &SpectralSummary, e: &SpectralSummary, n: &SpectralSummary, grid: &QuadratureGrid) -> f64 {
    let dv = &e.cov - &n.cov;
    let tr = a.cov.transpose().component_mul(&dv).sum();
    let terms: Vec<f64> = (0..grid.len())
        .map(|j| grid.weights[j] * (a.centered[j] * (e.centered[j] - n.centered[j]).conj()).re)
        .collect();
    2.0 * tr + 2.0 * crate::reduce::pairwise_sum(&terms)
}

pub fn script_l(mu: &ParticleMeasure, eta: &ParticleMeasure, nu: &ParticleMeasure, grid: &QuadratureGrid) -> Result<f64> {
    check_same_dim(&[mu, eta, nu], grid)?;
    Ok(script_l_from(&SpectralSummary::new(mu, grid), &SpectralSummary::new(eta, grid), &SpectralSummary::new(nu, grid), grid))
}

pub fn dmu_script_l_from(a: &SpectralSummary, e: &SpectralSummary, n: &SpectralSummary, x: &DVector<f64>, grid: &QuadratureGrid) -> DVector<f64> {
    let dv = &e.cov - &n.cov;
    let xc = x - &a.mean;
    // 2Σ_{ij} ΔV^{ij}((x−m)^j e_i + (x−m)^i e_j)
    2.0 * (&dv * &xc + dv.transpose() * &xc) + fourier_gradient_term(a, &table_diff(e, n), x, grid)
}

pub fn dxmu_script_l_from(a: &SpectralSummary, e: &SpectralSummary, n: &SpectralSummary, x: &DVector<f64>, grid: &QuadratureGrid) -> DMatrix<f64> {
    let dv = &e.cov - &n.cov;
    2.0 * (&dv + dv.transpose()) + fourier_hessian_term(a, &table_diff(e, n), x, grid)
}

/// `D_μ𝓛(μ, η, ν, x)` (derivative in the first slot).
pub fn dmu_script_l(mu: &ParticleMeasure, eta: &ParticleMeasure, nu: &ParticleMeasure, x: &DVector<f64>, grid: &QuadratureGrid) -> Result<DVector<f64>> {
    check_same_dim(&[mu, eta, nu], grid)?;
    let s = |m: &ParticleMeasure| SpectralSummary::new(m, grid);
    Ok(dmu_script_l_from(&s(mu), &s(eta), &s(nu), x, grid))
}

pub fn dxmu_script_l(mu: &ParticleMeasure, eta: &ParticleMeasure, nu: &ParticleMeasure, x: &DVector<f64>, grid: &QuadratureGrid) -> Result<DMatrix<f64>> {
    check_same_dim(&[mu, eta, nu], grid)?;
    let s = |m: &ParticleMeasure| SpectralSummary::new(m, grid);
    Ok(dxmu_script_l_from(&s(mu), &s(eta), &s(nu), x, grid))
}

/// Spectral data of the two anchors `μ*`, `μ̃*` of `Ψ` and `Ψ̃`.
#[derive(Debug, Clone)]
pub struct PsiAnchors {
    pub star: SpectralSummary,
    pub tilde_star: SpectralSummary,
}

impl PsiAnchors {
    pub fn new(mu_star: &ParticleMeasure, mu_tilde_star: &ParticleMeasure, grid: &QuadratureGrid) -> Result<Self> {
        check_same_dim(&[mu_star, mu_tilde_star], grid)?;
        Ok(Self { star: SpectralSummary::new(mu_star, grid), tilde_star: SpectralSummary::new(mu_tilde_star, grid) })
    }
}

/// `ρ_F²(S₀μ, S₀ν)` from summaries: only the covariance and Fourier parts.
fn centered_rho_f2(a: &SpectralSummary, b: &SpectralSummary, grid: &QuadratureGrid) -> f64 {
    crate::fourier::frobenius_sq(&(&a.cov - &b.cov)) + crate::fourier::weighted_sq_diff(&a.centered, &b.centered, grid)
}

/// `D_μ` of `μ ↦ ρ_F²(S₀μ, S₀ν)`: the mean term of `D_μρ_F²` drops out.
fn dmu_centered_rho_f2(a: &SpectralSummary, b: &SpectralSummary, x: &DVector<f64>, grid: &QuadratureGrid) -> DVector<f64> {
    4.0 * (&a.cov - &b.cov) * (x - &a.mean) + fourier_gradient_term(a, &table_diff(a, b), x, grid)
}

/// `(Ψ(μ), Ψ̃(μ))` with
/// `Ψ(μ) = 2ρ_F²(S₀μ, S₀μ*) + 𝓛(S₀μ, S₀μ*, S₀μ̃*)` and
/// `Ψ̃(μ) = 2ρ_F²(S₀μ, S₀μ̃*) − 𝓛(S₀μ, S₀μ*, S₀μ̃*)`.
pub fn psi_pair_from(a: &SpectralSummary, anchors: &PsiAnchors, grid: &QuadratureGrid) -> (f64, f64) {
    let l = script_l_from(a, &anchors.star, &anchors.tilde_star, grid);
    (
        2.0 * centered_rho_f2(a, &anchors.star, grid) + l,
        2.0 * centered_rho_f2(a, &anchors.tilde_star, grid) - l,
    )
}

pub fn psi_pair(mu: &ParticleMeasure, mu_star: &ParticleMeasure, mu_tilde_star: &ParticleMeasure, grid: &QuadratureGrid) -> Result<(f64, f64)> {
    check_same_dim(&[mu], grid)?;
    Ok(psi_pair_from(&SpectralSummary::new(mu, grid), &PsiAnchors::new(mu_star, mu_tilde_star, grid)?, grid))
}

/// `D_μΨ(μ, x)` at a general `μ`.
pub fn dmu_psi_raw(a: &SpectralSummary, anchors: &PsiAnchors, x: &DVector<f64>, grid: &QuadratureGrid) -> DVector<f64> {
    2.0 * dmu_centered_rho_f2(a, &anchors.star, x, grid) + dmu_script_l_from(a, &anchors.star, &anchors.tilde_star, x, grid)
}

/// `D_μΨ̃(μ, x)` at a general `μ`.
pub fn dmu_psi_tilde_raw(a: &SpectralSummary, anchors: &PsiAnchors, x: &DVector<f64>, grid: &QuadratureGrid) -> DVector<f64> {
    2.0 * dmu_centered_rho_f2(a, &anchors.tilde_star, x, grid) - dmu_script_l_from(a, &anchors.star, &anchors.tilde_star, x, grid)
}

pub fn dxmu_psi_raw(a: &SpectralSummary, anchors: &PsiAnchors, x: &DVector<f64>, grid: &QuadratureGrid) -> DMatrix<f64> {
    2.0 * dxmu_rho_f2_from(a, &anchors.star, x, grid) + dxmu_script_l_from(a, &anchors.star, &anchors.tilde_star, x, grid)
}

pub fn dxmu_psi_tilde_raw(a: &SpectralSummary, anchors: &PsiAnchors, x: &DVector<f64>, grid: &QuadratureGrid) -> DMatrix<f64> {
    2.0 * dxmu_rho_f2_from(a, &anchors.tilde_star, x, grid) - dxmu_script_l_from(a, &anchors.star, &anchors.tilde_star, x, grid)
}

/// `D_μΨ(μ*, x) / 2ε` in the reduced form valid at `μ = μ*`:
/// `(2/ε)(V(μ*) − V(μ̃*))(x − m(μ*)) + (1/ε)∫Re(ik(F_k(S₀μ*) − f_k(x−m(μ*)))(F_k(S₀μ*) − F_k(S₀μ̃*))^*) dk_λ`.
pub fn dmu_psi(anchors: &PsiAnchors, x: &DVector<f64>, grid: &QuadratureGrid, epsilon: f64) -> Result<DVector<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    let s = &anchors.star;
    let dv = &s.cov - &anchors.tilde_star.cov;
    let fourier = fourier_gradient_term(s, &table_diff(s, &anchors.tilde_star), x, grid);
    Ok((2.0 / epsilon) * dv * (x - &s.mean) + fourier / (2.0 * epsilon))
}

/// `D_μΨ̃(μ̃*, x) / 2ε` in reduced form at `μ = μ̃*`.
pub fn dmu_psi_tilde(anchors: &PsiAnchors, x: &DVector<f64>, grid: &QuadratureGrid, epsilon: f64) -> Result<DVector<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    let s = &anchors.tilde_star;
    Ok(-dmu_script_l_from(s, &anchors.star, s, x, grid) / (2.0 * epsilon))
}

/// `D_{xμ}Ψ(μ*, x)` at `μ = μ*`.
pub fn dxmu_psi(anchors: &PsiAnchors, x: &DVector<f64>, grid: &QuadratureGrid) -> DMatrix<f64> {
    dxmu_psi_raw(&anchors.star, anchors, x, grid)
}

/// `D_{xμ}Ψ̃(μ̃*, x)` at `μ = μ̃*`.
pub fn dxmu_psi_tilde(anchors: &PsiAnchors, x: &DVector<f64>, grid: &QuadratureGrid) -> DMatrix<f64> {
    dxmu_psi_tilde_raw(&anchors.tilde_star, anchors, x, grid)
}

// ---------------------------------------------------------------------------
// Finite differences

fn richardson2(coarse: f64, fine: f64) -> f64 {
    (4.0 * fine - coarse) / 3.0
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `d/dh u((I + hφ)_♯μ)` at `h = 0`, which equals `∫ φᵀ D_μu dμ`.
/// Central differences at `h` and `h/2`, Richardson-extrapolated.
pub fn fd_directional<U, P>(u: U, mu: &ParticleMeasure, phi: P, h: f64) -> Result<f64>
where
    U: Fn(&ParticleMeasure) -> f64,
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    let dirs: Vec<DVector<f64>> = mu.points().iter().map(&phi).collect();
    let shifted = |s: f64| -> Result<f64> {
        let pts = mu.points().iter().zip(&dirs).map(|(x, v)| x + s * v).collect();
        finite(u(&ParticleMeasure::new(pts, mu.weights().to_vec())?), "functional along push-forward")
    };
    let central = |h: f64| -> Result<f64> { Ok((shifted(h)? - shifted(-h)?) / (2.0 * h)) };
    Ok(richardson2(central(h)?, central(h / 2.0)?))
}

/// The push-forward oracle for a [`MeasureFunctional`] at `θ`.
pub fn fd_lions_derivative<P>(u: &MeasureFunctional, theta: &ThetaPoint, phi: P, h: f64) -> Result<f64>
where
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    fd_directional(|mu| u.eval_parts(theta.t, &theta.y, mu), &theta.mu, phi, h)
}

/// `∫ φᵀ g dμ` for a vector field `g`.
pub fn pair_with_field<P, G>(mu: &ParticleMeasure, phi: P, g: G) -> f64
where
    P: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let v: Vec<f64> = mu.iter().map(|(x, w)| w * phi(x).dot(&g(x))).collect();
    crate::reduce::pairwise_sum(&v)
}

fn with_atom(mu: &ParticleMeasure, x: DVector<f64>, eta: f64) -> ParticleMeasure {
    let mut pts = mu.points().to_vec();
    let mut w: Vec<f64> = mu.weights().iter().map(|v| v * (1.0 - eta)).collect();
    pts.push(x);
    w.push(eta);
    ParticleMeasure::new(pts, w).expect("mixture of valid measures")
}

/// Pointwise `D_μu(μ, x)` through the mixture `μ_η = (1−η)μ + ηδ_x`:
/// the gradient of `u(μ_η)` in the position of the added atom is
/// `η D_μu(μ_η, x)`. Richardson in both the step and `η`.
pub fn fd_lions_pointwise<U>(u: U, mu: &ParticleMeasure, x: &DVector<f64>, h: f64, eta: f64) -> Result<DVector<f64>>
where
    U: Fn(&ParticleMeasure) -> f64,
{
    let d = mu.dim();
    let grad = |e: f64| -> Result<DVector<f64>> {
        let mut g = DVector::zeros(d);
        for a in 0..d {
            let at = |s: f64| -> Result<f64> {
                let mut p = x.clone();
                p[a] += s;
                finite(u(&with_atom(mu, p, e)), "functional at mixture")
            };
            let c = |s: f64| -> Result<f64> { Ok((at(s)? - at(-s)?) / (2.0 * s * e)) };
            g[a] = richardson2(c(h)?, c(h / 2.0)?);
        }
        Ok(g)
    };
    Ok(2.0 * grad(eta / 2.0)? - grad(eta)?)
}

/// Pointwise `D_{xμ}u(μ, x)` from second differences in the position of the
/// mixture atom, `∂²u(μ_η)/∂x² = η D_{xμ}u(μ_η, x) + O(η²)`.
pub fn fd_dxmu_pointwise<U>(u: U, mu: &ParticleMeasure, x: &DVector<f64>, h: f64, eta: f64) -> Result<DMatrix<f64>>
where
    U: Fn(&ParticleMeasure) -> f64,
{
    let hess = |e: f64| -> Result<DMatrix<f64>> {
        let f = |z: &DVector<f64>| u(&with_atom(mu, x + z, e));
        Ok(hessian_fd(f, mu.dim(), h)? / e)
    };
    Ok(2.0 * hess(eta / 2.0)? - hess(eta)?)
}

/// Jacobian of a vector field by Richardson central differences:
/// entry `(a, b) = ∂_{x_b} F_a`.
pub fn fd_jacobian<F>(field: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = x.len();
    let m = field(x).len();
    let mut jac = DMatrix::zeros(m, d);
    for b in 0..d {
        let col = |s: f64| {
            let mut p = x.clone();
            p[b] += s;
            let mut q = x.clone();
            q[b] -= s;
            (field(&p) - field(&q)) / (2.0 * s)
        };
        let c = col(h);
        let f = col(h / 2.0);
        jac.set_column(b, &((4.0 * f - c) / 3.0));
    }
    jac
}

/// Symmetric Hessian of `z ↦ f(z)` at `z = 0` by Richardson-extrapolated
/// second differences.
pub fn hessian_fd<F>(f: F, n: usize, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let eval = |pairs: &[(usize, f64)]| -> Result<f64> {
        let mut z = DVector::zeros(n);
        for &(i, s) in pairs {
            z[i] += s;
        }
        finite(f(&z), "Hessian probe")
    };
    let f0 = eval(&[])?;
    let at = |h: f64| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = (eval(&[(i, h)])? - 2.0 * f0 + eval(&[(i, -h)])?) / (h * h);
            for j in 0..i {
                let v = (eval(&[(i, h), (j, h)])? - eval(&[(i, h), (j, -h)])? - eval(&[(i, -h), (j, h)])?
                    + eval(&[(i, -h), (j, -h)])?)
                    / (4.0 * h * h);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    };
    let c = at(h)?;
    let fine = at(h / 2.0)?;
    Ok((4.0 * fine - c) / 3.0)
}

/// Partial Hessian `ℋu(θ) = ∂²_z u(t, y, (I+z)_♯μ)|_{z=0}`.
pub fn partial_hessian(u: &MeasureFunctional, theta: &ThetaPoint, h: f64) -> Result<DMatrix<f64>> {
    hessian_fd(|z| u.eval_parts(theta.t, &theta.y, &theta.mu.translate(z)), theta.dim(), h)
}

/// Joint partial Hessian of `(μ, ν) ↦ f(μ, ν)` under independent
/// translations of the two slots; a `2d × 2d` matrix.
pub fn partial_hessian_pair<F>(f: F, mu: &ParticleMeasure, nu: &ParticleMeasure, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&ParticleMeasure, &ParticleMeasure) -> f64,
{
    let d = mu.dim();
    if nu.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: nu.dim() });
    }
    hessian_fd(
        |z| {
            let z1 = z.rows(0, d).into_owned();
            let z2 = z.rows(d, d).into_owned();
            f(&mu.translate(&z1), &nu.translate(&z2))
        },
        2 * d,
        h,
    )
}

/// Partial cross derivative `𝓓²_{yμ}u(θ)`, entry `(a, b) = ∂_{z_a}∂_{y_b}`.
pub fn cross_derivative(u: &MeasureFunctional, theta: &ThetaPoint, h: f64) -> Result<DMatrix<f64>> {
    let d = theta.dim();
    let full = hessian_fd(
        |w| {
            let z = w.rows(0, d).into_owned();
            let y = &theta.y + w.rows(d, d);
            u.eval_parts(theta.t, &y, &theta.mu.translate(&z))
        },
        2 * d,
        h,
    )?;
    Ok(full.view((0, d), (d, d)).into_owned())
}

fn fd_time(u: &MeasureFunctional, theta: &ThetaPoint, h: f64) -> Result<f64> {
    let at = |s: f64| finite(u.eval_parts(theta.t + s, &theta.y, &theta.mu), "time probe");
    let c = |s: f64| -> Result<f64> { Ok((at(s)? - at(-s)?) / (2.0 * s)) };
    Ok(richardson2(c(h)?, c(h / 2.0)?))
}

fn fd_space(u: &MeasureFunctional, theta: &ThetaPoint, h: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let f = |z: &DVector<f64>| u.eval_parts(theta.t, &(&theta.y + z), &theta.mu);
    let grad = fd_jacobian(|z| DVector::from_element(1, f(z)), &DVector::zeros(theta.dim()), h).transpose();
    let hess = hessian_fd(f, theta.dim(), h)?;
    Ok((grad.column(0).into_owned(), hess))
}

// ---------------------------------------------------------------------------
// Jets

pub type JetVector = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JetMatrix = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// `(b, p, X¹¹, f, g, X¹², X²²)`: time derivative, space gradient and Hessian,
/// measure gradient and its `x`-derivative as functions of `x`, the cross
/// derivative and the partial Hessian.
#[derive(Clone)]
pub struct Jet {
    pub b: f64,
    pub p: DVector<f64>,
    pub x11: DMatrix<f64>,
    pub f: JetVector,
    pub g: JetMatrix,
    pub x12: DMatrix<f64>,
    pub x22: DMatrix<f64>,
    pub f_growth: GrowthTag,
    pub g_growth: GrowthTag,
}

impl fmt::Debug for Jet {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("Jet")
            .field("b", &self.b)
            .field("p", &self.p)
            .field("x11", &self.x11)
            .field("x12", &self.x12)
            .field("x22", &self.x22)
            .finish_non_exhaustive()
    }
}

/// Componentwise maximum discrepancy between two jets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JetGap {
    pub b: f64,
    pub p: f64,
    pub x11: f64,
    pub f: f64,
    pub g: f64,
    pub x12: f64,
    pub x22: f64,
}

impl JetGap {
    pub fn max(&self) -> f64 {
        [self.b, self.p, self.x11, self.f, self.g, self.x12, self.x22].into_iter().fold(0.0, f64::max)
    }
}

fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, b| a.max(b.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && max_abs(&(m - m.transpose())) <= tol
}

impl Jet {
    pub fn new(b: f64, p: DVector<f64>, x11: DMatrix<f64>, f: JetVector, g: JetMatrix, x12: DMatrix<f64>, x22: DMatrix<f64>) -> Result<Self> {
        for (m, name) in [(&x11, "X11"), (&x22, "X22")] {
            if !is_symmetric(m, 1e-12) {
                let gap = max_abs(&(m - m.transpose()));
                return Err(Error::InvalidParameter(format!("{name} not symmetric (gap {gap:e})")));
            }
        }
        Ok(Self { b, p, x11, f, g, x12, x22, f_growth: GrowthTag::default(), g_growth: GrowthTag::default() })
    }

    /// Every slot from the closed-form callbacks of `u`.
    pub fn from_closed_form(u: &MeasureFunctional, theta: &ThetaPoint) -> Result<Self> {
        let missing = |s: &str| Error::InvalidParameter(format!("{} has no closed-form {s}", u.name));
        let d_mu = u.d_mu.clone().ok_or_else(|| missing("D_mu"))?;
        let d_x_mu = u.d_x_mu.clone().ok_or_else(|| missing("D_xmu"))?;
        let th1 = theta.clone();
        let th2 = theta.clone();
        let mut jet = Self::new(
            u.d_t.as_ref().ok_or_else(|| missing("d_t"))?(theta),
            u.d_y.as_ref().ok_or_else(|| missing("D_y"))?(theta),
            sym(u.d_yy.as_ref().ok_or_else(|| missing("D_yy"))?(theta)),
            Arc::new(move |x| d_mu(&th1, x)),
            Arc::new(move |x| d_x_mu(&th2, x)),
            u.d_y_mu.as_ref().ok_or_else(|| missing("D_ymu"))?(theta),
            sym(u.hessian.as_ref().ok_or_else(|| missing("H"))?(theta)),
        )?;
        jet.f_growth = u.growth;
        Ok(jet)
    }

    /// Every slot from finite differences of `u` alone.
    pub fn from_finite_differences(u: &MeasureFunctional, theta: &ThetaPoint, h: f64) -> Result<Self> {
        let b = fd_time(u, theta, h)?;
        let (p, x11) = fd_space(u, theta, h)?;
        let x12 = cross_derivative(u, theta, h)?;
        let x22 = partial_hessian(u, theta, h)?;
        let (u1, th1) = (u.clone(), theta.clone());
        let (u2, th2) = (u.clone(), theta.clone());
        let eta = 1e-3;
        let f: JetVector = Arc::new(move |x| {
            fd_lions_pointwise(|m| u1.eval_parts(th1.t, &th1.y, m), &th1.mu, x, h, eta)
                .unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN))
        });
        let g: JetMatrix = Arc::new(move |x| {
            fd_dxmu_pointwise(|m| u2.eval_parts(th2.t, &th2.y, m), &th2.mu, x, h, eta)
                .unwrap_or_else(|_| DMatrix::from_element(x.len(), x.len(), f64::NAN))
        });
        Self::new(b, p, sym(x11), f, g, x12, sym(x22))
    }

    /// Slotwise maximum absolute difference, with function slots compared
    /// at `points`.
    pub fn gap(&self, other: &Self, points: &[DVector<f64>]) -> JetGap {
        let mut f = 0.0f64;
        let mut g = 0.0f64;
        for x in points {
            f = f.max(max_abs_vec(&((self.f)(x) - (other.f)(x))));
            g = g.max(max_abs(&((self.g)(x) - (other.g)(x))));
        }
        JetGap {
            b: (self.b - other.b).abs(),
            p: max_abs_vec(&(&self.p - &other.p)),
            x11: max_abs(&(&self.x11 - &other.x11)),
            f,
            g,
            x12: max_abs(&(&self.x12 - &other.x12)),
            x22: max_abs(&(&self.x22 - &other.x22)),
        }
    }
}

/// `(M + Mᵀ)/2`.
pub fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

// ---------------------------------------------------------------------------
// Cross-validation suite

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivKind {
    DmuRhoF2,
    DxmuRhoF2,
    DmuScriptL,
    DxmuScriptL,
    DmuPsi,
    DmuPsiTilde,
    DmuPsiRaw,
}

impl DerivKind {
    pub const ALL: [DerivKind; 7] = [
        DerivKind::DmuRhoF2,
        DerivKind::DxmuRhoF2,
        DerivKind::DmuScriptL,
        DerivKind::DxmuScriptL,
        DerivKind::DmuPsi,
        DerivKind::DmuPsiTilde,
        DerivKind::DmuPsiRaw,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            DerivKind::DmuRhoF2 => "dmu_rho_f2",
            DerivKind::DxmuRhoF2 => "dxmu_rho_f2",
            DerivKind::DmuScriptL => "dmu_script_l",
            DerivKind::DxmuScriptL => "dxmu_script_l",
            DerivKind::DmuPsi => "dmu_psi",
            DerivKind::DmuPsiTilde => "dmu_psi_tilde",
            DerivKind::DmuPsiRaw => "dmu_psi_raw",
        }
    }
}

/// One closed-form versus oracle comparison. Vector and matrix outputs are
/// compared in the max norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivCheckRow {
    pub case_id: usize,
    pub kind: DerivKind,
    pub dim: usize,
    pub closed_form: f64,
    pub oracle: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

impl DerivCheckRow {
    /// Relative error below `rel_tol`, or absolute below `abs_tol` near zero.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.rel_err < rel_tol || self.abs_err < abs_tol
    }

    pub fn csv_header() -> &'static str {
        "case_id,kind,dim,closed_form,oracle,abs_err,rel_err"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{:e}",
            self.case_id,
            self.kind.label(),
            self.dim,
            self.closed_form,
            self.oracle,
            self.abs_err,
            self.rel_err
        )
    }
}

fn row(case_id: usize, kind: DerivKind, dim: usize, cf: f64, oracle: f64) -> DerivCheckRow {
    let abs_err = (cf - oracle).abs();
    DerivCheckRow { case_id, kind, dim, closed_form: cf, oracle, abs_err, rel_err: abs_err / oracle.abs().max(f64::MIN_POSITIVE) }
}

fn matrix_row(case_id: usize, kind: DerivKind, dim: usize, cf: &DMatrix<f64>, oracle: &DMatrix<f64>) -> DerivCheckRow {
    let abs_err = max_abs(&(cf - oracle));
    let scale = max_abs(oracle);
    DerivCheckRow {
        case_id,
        kind,
        dim,
        closed_form: max_abs(cf),
        oracle: scale,
        abs_err,
        rel_err: abs_err / scale.max(f64::MIN_POSITIVE),
    }
}

/// Settings for [`derivcheck_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivCheckConfig {
    pub instances: usize,
    pub grid_level_1d: u32,
    pub grid_level_2d: u32,
    pub step: f64,
    pub max_points: usize,
    pub epsilon: f64,
}

impl Default for DerivCheckConfig {
    fn default() -> Self {
        Self { instances: 100, grid_level_1d: 6, grid_level_2d: 4, step: DEFAULT_STEP, max_points: 6, epsilon: 0.1 }
    }
}

/// Random cross-validation of every closed form against its finite-difference
/// oracle; instances alternate between `d = 1` and `d = 2`.
pub fn derivcheck_suite(cfg: &DerivCheckConfig, seed: u64) -> Result<Vec<DerivCheckRow>> {
    let grids = [
        Arc::new(crate::fourier::build_grid(1, QuadratureGrid::default_lambda(1), cfg.grid_level_1d)?),
        Arc::new(crate::fourier::build_grid(2, QuadratureGrid::default_lambda(2), cfg.grid_level_2d)?),
    ];
    let cases: Vec<Result<Vec<DerivCheckRow>>> = {
        use rayon::prelude::*;
        (0..cfg.instances)
            .into_par_iter()
            .map(|case| {
                let mut rng = crate::rng::stream(seed, case as u64);
                let dim = 1 + case % 2;
                derivcheck_case(case, dim, &grids[dim - 1], cfg, &mut rng)
            })
            .collect()
    };
    let mut out = Vec::new();
    for c in cases {
        out.extend(c?);
    }
    Ok(out)
}

fn derivcheck_case<R: Rng>(case: usize, dim: usize, grid: &QuadratureGrid, cfg: &DerivCheckConfig, rng: &mut R) -> Result<Vec<DerivCheckRow>> {
    let top = cfg.max_points.max(3);
    let mut n = || rng.random_range(3..=top);
    let (n1, n2, n3) = (n(), n(), n());
    let mu = random_measure(rng, dim, n1, 1.0);
    let nu = random_measure(rng, dim, n2, 1.0);
    let eta = random_measure(rng, dim, n3, 1.0);
    let phi = RandomField::sample(rng, dim);
    let x = DVector::from_fn(dim, |_, _| rng.random_range(-1.5..1.5));
    let h = cfg.step;
    let s = |m: &ParticleMeasure| SpectralSummary::new(m, grid);
    let (smu, snu, seta) = (s(&mu), s(&nu), s(&eta));
    let mut rows = Vec::new();

    // D_μ ρ_F²(·, ν)
    let oracle = fd_directional(|m| rho_f_squared(m, &nu, grid).unwrap_or(f64::NAN), &mu, |p| phi.eval(p), h)?;
    let cf = pair_with_field(&mu, |p| phi.eval(p), |p| dmu_rho_f2_from(&smu, &snu, p, grid));
    rows.push(row(case, DerivKind::DmuRhoF2, dim, cf, oracle));

    // D_{xμ} ρ_F² against the x-derivative of D_μ ρ_F²
    let oracle = fd_jacobian(|p| dmu_rho_f2_from(&smu, &snu, p, grid), &x, h);
    rows.push(matrix_row(case, DerivKind::DxmuRhoF2, dim, &dxmu_rho_f2_from(&smu, &snu, &x, grid), &oracle));

    // D_μ 𝓛(·, η, ν)
    let oracle = fd_directional(|m| script_l_from(&s(m), &seta, &snu, grid), &mu, |p| phi.eval(p), h)?;
    let cf = pair_with_field(&mu, |p| phi.eval(p), |p| dmu_script_l_from(&smu, &seta, &snu, p, grid));
    rows.push(row(case, DerivKind::DmuScriptL, dim, cf, oracle));

    let oracle = fd_jacobian(|p| dmu_script_l_from(&smu, &seta, &snu, p, grid), &x, h);
    rows.push(matrix_row(case, DerivKind::DxmuScriptL, dim, &dxmu_script_l_from(&smu, &seta, &snu, &x, grid), &oracle));

    // Ψ at μ* = μ, μ̃* = ν; Ψ̃ at μ̃* = ν.
    let anchors = PsiAnchors { star: smu.clone(), tilde_star: snu.clone() };
    let eps = cfg.epsilon;
    let oracle = fd_directional(|m| psi_pair_from(&s(m), &anchors, grid).0 / (2.0 * eps), &mu, |p| phi.eval(p), h)?;
    let cf = pair_with_field(&mu, |p| phi.eval(p), |p| dmu_psi(&anchors, p, grid, eps).expect("eps > 0"));
    rows.push(row(case, DerivKind::DmuPsi, dim, cf, oracle));

    let oracle = fd_directional(|m| psi_pair_from(&s(m), &anchors, grid).1 / (2.0 * eps), &nu, |p| phi.eval(p), h)?;
    let cf = pair_with_field(&nu, |p| phi.eval(p), |p| dmu_psi_tilde(&anchors, p, grid, eps).expect("eps > 0"));
    rows.push(row(case, DerivKind::DmuPsiTilde, dim, cf, oracle));

    // Ψ away from its anchor: μ = η.
    let oracle = fd_directional(|m| psi_pair_from(&s(m), &anchors, grid).0, &eta, |p| phi.eval(p), h)?;
    let cf = pair_with_field(&eta, |p| phi.eval(p), |p| dmu_psi_raw(&seta, &anchors, p, grid));
    rows.push(row(case, DerivKind::DmuPsiRaw, dim, cf, oracle));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::build_grid;

    fn grid(d: usize, level: u32) -> Arc<QuadratureGrid> {
        Arc::new(build_grid(d, QuadratureGrid::default_lambda(d), level).unwrap())
    }

    fn pm(pairs: &[(f64, f64)]) -> ParticleMeasure {
        ParticleMeasure::from_pairs_1d(pairs).unwrap()
    }

    fn theta(mu: ParticleMeasure) -> ThetaPoint {
        let d = mu.dim();
        ThetaPoint::new(0.3, DVector::from_element(d, 0.2), mu).unwrap()
    }

    #[test]
    fn dmu_rho_f2_at_equal_measures_vanishes() {
        let g = grid(1, 5);
        let mu = pm(&[(-0.5, 0.3), (0.8, 0.7)]);
        let v = dmu_rho_f2(&mu, &mu, &DVector::from_element(1, 0.4), &g).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(dxmu_rho_f2(&mu, &mu, &DVector::from_element(1, 0.4), &g).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn dmu_rho_f2_on_diracs_is_mean_term() {
        let g = grid(2, 3);
        let c = DVector::from_vec(vec![0.5, -1.0]);
        let v = dmu_rho_f2(&ParticleMeasure::dirac(DVector::zeros(2)), &ParticleMeasure::dirac(c.clone()), &DVector::from_vec(vec![3.0, 1.0]), &g).unwrap();
        assert!((v + 2.0 * c).norm() < 1e-14);
    }

    #[test]
    fn dxmu_vanishes_for_translates() {
        let g = grid(1, 5);
        let mu = pm(&[(-0.5, 0.3), (0.8, 0.7)]);
        let nu = mu.translate(&DVector::from_element(1, 1.3));
        let m = dxmu_rho_f2(&mu, &nu, &DVector::from_element(1, 0.1), &g).unwrap();
        assert!(m[(0, 0)].abs() < 1e-13);
    }

    #[test]
    fn dmu_rho_f2_matches_oracle() {
        let g = grid(1, 5);
        let mu = pm(&[(-0.5, 0.3), (0.1, 0.2), (0.8, 0.5)]);
        let nu = pm(&[(-0.2, 0.6), (1.1, 0.4)]);
        let phi = |x: &DVector<f64>| DVector::from_element(1, 0.3 + (2.0 * x[0]).sin());
        let oracle = fd_directional(|m| rho_f_squared(m, &nu, &g).unwrap(), &mu, phi, DEFAULT_STEP).unwrap();
        let cf = pair_with_field(&mu, phi, |x| dmu_rho_f2(&mu, &nu, x, &g).unwrap());
        assert!((cf - oracle).abs() < 1e-8 * oracle.abs().max(1.0), "{cf} {oracle}");
    }

    #[test]
    fn pointwise_oracle_matches_closed_form() {
        let g = grid(1, 5);
        let mu = pm(&[(-0.5, 0.3), (0.1, 0.2), (0.8, 0.5)]);
        let nu = pm(&[(-0.2, 0.6), (1.1, 0.4)]);
        let x = DVector::from_element(1, 0.37);
        let f = |m: &ParticleMeasure| rho_f_squared(m, &nu, &g).unwrap();
        let fd = fd_lions_pointwise(f, &mu, &x, DEFAULT_STEP, 1e-3).unwrap();
        let cf = dmu_rho_f2(&mu, &nu, &x, &g).unwrap();
        assert!((&fd - &cf).amax() < 1e-6, "{fd} {cf}");
        let fd2 = fd_dxmu_pointwise(f, &mu, &x, 1e-2, 1e-3).unwrap();
        let cf2 = dxmu_rho_f2(&mu, &nu, &x, &g).unwrap();
        assert!((&fd2 - &cf2).amax() < 1e-4, "{fd2} {cf2}");
    }

    #[test]
    fn linear_functional_gradient_on_support() {
        let u = MeasureFunctional::linear(
            "sin",
            |x| x[0].sin(),
            |x| DVector::from_element(1, x[0].cos()),
            |x| DMatrix::from_element(1, 1, -x[0].sin()),
        );
        let mu = pm(&[(-0.5, 0.3), (0.1, 0.2), (0.8, 0.5)]);
        for x in mu.points() {
            let fd = fd_lions_pointwise(|m| u.eval_parts(0.0, &DVector::zeros(1), m), &mu, x, DEFAULT_STEP, 1e-3).unwrap();
            assert!((fd[0] - x[0].cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_examples() {
        let th = theta(ParticleMeasure::new(
            vec![DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![-0.4, 0.9])],
            vec![0.5, 0.5],
        ).unwrap());
        let h = partial_hessian(&MeasureFunctional::mean_norm_sq(), &th, DEFAULT_STEP).unwrap();
        assert!((h - 2.0 * DMatrix::<f64>::identity(2, 2)).amax() < 1e-7);
        let c = cross_derivative(&MeasureFunctional::y_dot_mean(), &th, DEFAULT_STEP).unwrap();
        assert!((c - DMatrix::identity(2, 2)).amax() < 1e-7);
        let c0 = cross_derivative(&MeasureFunctional::mean_norm_sq(), &th, DEFAULT_STEP).unwrap();
        assert!(c0.amax() < 1e-7);
    }

    #[test]
    fn hessian_pair_of_rho_f2() {
        let g = grid(1, 5);
        let mu = pm(&[(-0.5, 0.3), (0.8, 0.7)]);
        let nu = pm(&[(0.2, 0.4), (1.0, 0.6)]);
        let hp = partial_hessian_pair(|a, b| rho_f_squared(a, b, &g).unwrap(), &mu, &nu, DEFAULT_STEP).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]);
        assert!((hp - expect).amax() < 1e-5);
    }

    #[test]
    fn d_f2_hessian_and_cross() {
        let g = grid(1, 5);
        let target = theta(pm(&[(0.2, 0.4), (1.0, 0.6)]));
        let u = MeasureFunctional::d_f2_to(target, g);
        let th = theta(pm(&[(-0.5, 0.3), (0.8, 0.7)]));
        assert!((partial_hessian(&u, &th, DEFAULT_STEP).unwrap()[(0, 0)] - 2.0).abs() < 1e-6);
        assert!(cross_derivative(&u, &th, DEFAULT_STEP).unwrap()[(0, 0)].abs() < 1e-6);
    }

    #[test]
    fn script_l_antisymmetry_and_zero() {
        let g = grid(1, 5);
        let mu = pm(&[(-0.5, 0.3), (0.8, 0.7)]);
        let eta = pm(&[(0.2, 0.4), (1.0, 0.6)]);
        let nu = pm(&[(0.0, 0.5), (2.0, 0.5)]);
        assert_eq!(script_l(&mu, &nu, &nu, &g).unwrap(), 0.0);
        let a = script_l(&mu, &eta, &nu, &g).unwrap();
        let b = script_l(&mu, &nu, &eta, &g).unwrap();
        assert!((a + b).abs() < 1e-14);
    }

    #[test]
    fn psi_examples() {
        let g = grid(1, 5);
        let mu = pm(&[(-0.5, 0.3), (0.8, 0.7)]);
        let (p, pt) = psi_pair(&mu, &mu, &mu, &g).unwrap();
        assert_eq!((p, pt), (0.0, 0.0));
        let other = pm(&[(0.2, 0.4), (1.0, 0.6)]);
        let (p, _) = psi_pair(&mu, &mu, &other, &g).unwrap();
        let l = script_l(&mu.center(), &mu.center(), &other.center(), &g).unwrap();
        assert!((p - l).abs() < 1e-14);
    }

    #[test]
    fn psi_parallelogram_inequality() {
        let g = grid(1, 5);
        let mut rng = crate::rng::stream(3, 0);
        for _ in 0..20 {
            let mu = random_measure(&mut rng, 1, 3, 1.0);
            let ms = random_measure(&mut rng, 1, 3, 1.0);
            let mt = random_measure(&mut rng, 1, 3, 1.0);
            let (p, pt) = psi_pair(&mu, &ms, &mt, &g).unwrap();
            let rhs = rho_f_squared(&ms.center(), &mt.center(), &g).unwrap();
            assert!(p + pt >= rhs - 1e-12);
        }
    }

    #[test]
    fn dmu_psi_reduced_equals_raw_at_anchor() {
        let g = grid(1, 5);
        let ms = pm(&[(-0.5, 0.3), (0.8, 0.7)]);
        let mt = pm(&[(0.2, 0.4), (1.0, 0.6)]);
        let a = PsiAnchors::new(&ms, &mt, &g).unwrap();
        for x in [-1.0, 0.0, 0.7] {
            let x = DVector::from_element(1, x);
            let reduced = dmu_psi(&a, &x, &g, 0.25).unwrap();
            let raw = dmu_psi_raw(&a.star, &a, &x, &g) / 0.5;
            assert!((reduced - raw).amax() < 1e-12);
            let reduced_t = dmu_psi_tilde(&a, &x, &g, 0.25).unwrap();
            let raw_t = dmu_psi_tilde_raw(&a.tilde_star, &a, &x, &g) / 0.5;
            assert!((reduced_t - raw_t).amax() < 1e-12);
        }
        let same = PsiAnchors::new(&ms, &ms, &g).unwrap();
        assert!(dmu_psi(&same, &DVector::from_element(1, 0.3), &g, 0.1).unwrap().amax() == 0.0);
    }

    #[test]
    fn dmu_psi_affine_part() {
        // Removing the Fourier part leaves (2/ε)ΔV (x − m*), affine in x.
        let g = grid(1, 5);
        let ms = pm(&[(-0.5, 0.3), (0.8, 0.7)]);
        let mt = pm(&[(0.2, 0.4), (1.0, 0.6)]);
        let a = PsiAnchors::new(&ms, &mt, &g).unwrap();
        let eps = 0.2;
        let xs: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let x = DVector::from_element(1, x);
                let diff = table_diff(&a.star, &a.tilde_star);
                (dmu_psi(&a, &x, &g, eps).unwrap() - fourier_gradient_term(&a.star, &diff, &x, &g) / (2.0 * eps))[0]
            })
            .collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let resid = xs.iter().zip(&ys).map(|(x, y)| (y - my - slope * (x - mx)).abs()).fold(0.0, f64::max);
        assert!(resid < 1e-8);
        let dv = ms.covariance()[(0, 0)] - mt.covariance()[(0, 0)];
        assert!((slope - 2.0 * dv / eps).abs() < 1e-10);
    }

    #[test]
    fn jets_agree() {
        let g = grid(1, 5);
        let target = ThetaPoint::new(0.1, DVector::from_element(1, -0.3), pm(&[(0.2, 0.4), (1.0, 0.6)])).unwrap();
        let u = MeasureFunctional::d_f2_to(target, g)
            .plus(&MeasureFunctional::y_dot_mean())
            .plus(&MeasureFunctional::time_space_poly(1.5))
            .plus(&MeasureFunctional::mean_norm_sq().measure_only());
        let th = ThetaPoint::new(0.4, DVector::from_element(1, 0.5), pm(&[(-0.5, 0.3), (0.8, 0.7)])).unwrap();
        let cf = Jet::from_closed_form(&u, &th).unwrap();
        let fd = Jet::from_finite_differences(&u, &th, 1e-2).unwrap();
        let gap = cf.gap(&fd, th.mu.points());
        assert!(gap.max() < 1e-4, "{gap:?}");
    }

    #[test]
    fn small_suite_passes() {
        let cfg = DerivCheckConfig { instances: 4, grid_level_1d: 4, grid_level_2d: 3, ..Default::default() };
        let rows = derivcheck_suite(&cfg, 11).unwrap();
        assert_eq!(rows.len(), 4 * DerivKind::ALL.len());
        for r in &rows {
            assert!(r.passes(1e-4, 1e-6), "{r:?}");
        }
    }
}
