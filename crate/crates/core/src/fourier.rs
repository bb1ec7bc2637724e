//! Characteristic functions and the Fourier–Wasserstein metric.
//!
//! Convention: `f_k(x) = (2π)^{−d/2} e^{−i k·x}` and `F_k(μ) = ∫ f_k dμ`.
//!
//! `ρ_F²(μ,ν) = |m(μ)−m(ν)|² + |V(μ)−V(ν)|²_F + ∫ |F_k(S₀μ) − F_k(S₀ν)|² (1+|k|²)^{−λ} dk`

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::ParticleMeasure;
use crate::reduce::pairwise_sum;

pub use crate::quadrature::{build_grid, GridScheme, QuadratureGrid};

/// `(2π)^{−d/2}`.
pub fn fourier_prefactor(dim: usize) -> f64 {
    (2.0 * PI).powf(-(dim as f64) / 2.0)
}

/// `f_k(x)`.
pub fn basis_fn(k: &DVector<f64>, x: &DVector<f64>) -> Complex64 {
    let phase = -k.dot(x);
    Complex64::new(phase.cos(), phase.sin()) * fourier_prefactor(k.len())
}

/// `F_k(μ) = (2π)^{−d/2} Σ_i w_i e^{−i k·x_i}`.
pub fn char_fn(mu: &ParticleMeasure, k: &DVector<f64>) -> Complex64 {
    let mut re = Vec::with_capacity(mu.len());
    let mut im = Vec::with_capacity(mu.len());
    for (x, w) in mu.iter() {
        let phase = -k.dot(x);
        re.push(w * phase.cos());
        im.push(w * phase.sin());
    }
    Complex64::new(pairwise_sum(&re), pairwise_sum(&im)) * fourier_prefactor(mu.dim())
}

/// `F_k(μ)` at every grid node (node order).
pub fn char_table(mu: &ParticleMeasure, grid: &QuadratureGrid) -> Vec<Complex64> {
    grid.nodes.par_iter().map(|k| char_fn(mu, k)).collect()
}

fn check_dims(mu: &ParticleMeasure, nu: &ParticleMeasure, grid: &QuadratureGrid) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: nu.dim() });
    }
    if grid.dim != mu.dim() {
        return Err(Error::DimensionMismatch { expected: grid.dim, got: mu.dim() });
    }
    Ok(())
}

/// Mean, covariance and centered characteristic function of one measure on
/// a fixed grid. Everything `ρ_F` and its derivatives need.
#[derive(Debug, Clone)]
pub struct SpectralSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `F_{k_j}(S₀ μ)`.
    pub centered: Vec<Complex64>,
}

impl SpectralSummary {
    pub fn new(mu: &ParticleMeasure, grid: &QuadratureGrid) -> Self {
        Self { mean: mu.mean(), cov: mu.covariance(), centered: char_table(&mu.center(), grid) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// The three squared pieces of `ρ_F²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoFParts {
    pub mean_sq: f64,
    pub cov_sq: f64,
    pub fourier_sq: f64,
}

impl RhoFParts {
    pub fn total_sq(&self) -> f64 {
        self.mean_sq + self.cov_sq + self.fourier_sq
    }
}

/// `Σ_j q_j |a_j − b_j|²`.
pub fn weighted_sq_diff(a: &[Complex64], b: &[Complex64], grid: &QuadratureGrid) -> f64 {
    let terms: Vec<f64> = a
        .iter()
        .zip(b)
        .zip(&grid.weights)
        .map(|((x, y), q)| q * (x - y).norm_sqr())
        .collect();
    pairwise_sum(&terms)
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn rho_f_parts_from(a: &SpectralSummary, b: &SpectralSummary, grid: &QuadratureGrid) -> RhoFParts {
    RhoFParts {
        mean_sq: (&a.mean - &b.mean).norm_squared(),
        cov_sq: frobenius_sq(&(&a.cov - &b.cov)),
        fourier_sq: weighted_sq_diff(&a.centered, &b.centered, grid),
    }
}

pub fn rho_f_parts(mu: &ParticleMeasure, nu: &ParticleMeasure, grid: &QuadratureGrid) -> Result<RhoFParts> {
    check_dims(mu, nu, grid)?;
    Ok(rho_f_parts_from(&SpectralSummary::new(mu, grid), &SpectralSummary::new(nu, grid), grid))
}

pub fn rho_f_squared(mu: &ParticleMeasure, nu: &ParticleMeasure, grid: &QuadratureGrid) -> Result<f64> {
    Ok(rho_f_parts(mu, nu, grid)?.total_sq())
}

/// The Fourier–Wasserstein metric `ρ_F(μ, ν)`.
pub fn rho_f(mu: &ParticleMeasure, nu: &ParticleMeasure, grid: &QuadratureGrid) -> Result<f64> {
    Ok(rho_f_squared(mu, nu, grid)?.sqrt())
}

/// `‖μ − ν‖_λ = sup_{‖f‖_λ ≤ 1} (μ − ν)(f)`.
///
/// Under the frozen `f_k` convention Fourier inversion reads
/// `η(f) = ∫ F_{−k}(η) 𝓕f(k) dk`, so by Cauchy–Schwarz the supremum is
/// `√(∫ |F_k(μ) − F_k(ν)|² (1+|k|²)^{−λ} dk)` with no further prefactor.
pub fn dual_norm_lambda(mu: &ParticleMeasure, nu: &ParticleMeasure, grid: &QuadratureGrid) -> Result<f64> {
    check_dims(mu, nu, grid)?;
    let a = char_table(mu, grid);
    let b = char_table(nu, grid);
    Ok(weighted_sq_diff(&a, &b, grid).sqrt())
}

/// `θ = (t, y, μ) ∈ [0,T] × ℝ^d × 𝒫₂(ℝ^d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPoint {
    pub t: f64,
    pub y: DVector<f64>,
    pub mu: ParticleMeasure,
}

impl ThetaPoint {
    pub fn new(t: f64, y: DVector<f64>, mu: ParticleMeasure) -> Result<Self> {
        if y.len() != mu.dim() {
            return Err(Error::DimensionMismatch { expected: mu.dim(), got: y.len() });
        }
        if !t.is_finite() || t < 0.0 {
            return Err(Error::InvalidParameter(format!("time {t} outside [0, T]")));
        }
        Ok(Self { t, y, mu })
    }

    /// Checks `t ≤ horizon`.
    pub fn within(&self, horizon: f64) -> bool {
        self.t >= 0.0 && self.t <= horizon
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

/// `d_F²(θ, θ̃) = |t − t̃|² + |y − ỹ|² + ρ_F²(μ, μ̃)`.
pub fn d_f_squared(a: &ThetaPoint, b: &ThetaPoint, grid: &QuadratureGrid) -> Result<f64> {
    let dt = a.t - b.t;
    Ok(dt * dt + (&a.y - &b.y).norm_squared() + rho_f_squared(&a.mu, &b.mu, grid)?)
}

pub fn d_f(a: &ThetaPoint, b: &ThetaPoint, grid: &QuadratureGrid) -> Result<f64> {
    Ok(d_f_squared(a, b, grid)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1() -> QuadratureGrid {
        build_grid(1, 8, 5).unwrap()
    }

    #[test]
    fn char_fn_examples() {
        let c = fourier_prefactor(1);
        let d0 = ParticleMeasure::dirac(DVector::from_element(1, 0.0));
        for k in [0.0, 1.3, -7.0] {
            let f = char_fn(&d0, &DVector::from_element(1, k));
            assert!((f - Complex64::new(c, 0.0)).norm() < 1e-15);
        }
        let sym = ParticleMeasure::from_pairs_1d(&[(-1.0, 0.5), (1.0, 0.5)]).unwrap();
        let f0 = char_fn(&sym, &DVector::from_element(1, 0.0));
        assert!((f0.re - c).abs() < 1e-15);
        for k in [0.3, 2.0, -4.1] {
            let f = char_fn(&sym, &DVector::from_element(1, k));
            assert!((f.re - c * k.cos()).abs() < 1e-15 && f.im.abs() < 1e-15);
        }
    }

    #[test]
    fn char_fn_sign_convention() {
        // F_k(δ_a) = c e^{-ika}
        let a = 0.7;
        let k = 1.9;
        let f = char_fn(&ParticleMeasure::dirac(DVector::from_element(1, a)), &DVector::from_element(1, k));
        assert!((f.im + fourier_prefactor(1) * (k * a).sin()).abs() < 1e-15);
    }

    #[test]
    fn rho_f_zero_on_identical() {
        let mu = ParticleMeasure::from_pairs_1d(&[(-0.3, 0.2), (0.4, 0.5), (1.1, 0.3)]).unwrap();
        assert_eq!(rho_f(&mu, &mu, &grid1()).unwrap(), 0.0);
    }

    #[test]
    fn rho_f_of_diracs_is_mean_gap() {
        let g = build_grid(2, 9, 3).unwrap();
        let c = DVector::from_vec(vec![0.6, -1.7]);
        let d = rho_f(&ParticleMeasure::dirac(DVector::zeros(2)), &ParticleMeasure::dirac(c.clone()), &g).unwrap();
        assert!((d - c.norm()).abs() < 1e-14);
    }

    #[test]
    fn rho_f_rejects_grid_dim_mismatch() {
        let g = build_grid(2, 9, 2).unwrap();
        let mu = ParticleMeasure::dirac(DVector::zeros(1));
        assert!(matches!(rho_f(&mu, &mu, &g), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn dual_norm_vanishes_on_equal_measures() {
        let mu = ParticleMeasure::from_pairs_1d(&[(-0.3, 0.5), (0.4, 0.5)]).unwrap();
        assert_eq!(dual_norm_lambda(&mu, &mu, &grid1()).unwrap(), 0.0);
    }

    #[test]
    fn d_f_examples() {
        let g = grid1();
        let mu = ParticleMeasure::from_pairs_1d(&[(-0.3, 0.5), (0.4, 0.5)]).unwrap();
        let nu = ParticleMeasure::from_pairs_1d(&[(0.1, 0.25), (0.9, 0.75)]).unwrap();
        let a = ThetaPoint::new(0.2, DVector::from_element(1, 1.0), mu.clone()).unwrap();
        assert_eq!(d_f(&a, &a, &g).unwrap(), 0.0);
        let mut b = a.clone();
        b.t = 0.7;
        assert!((d_f(&a, &b, &g).unwrap() - 0.5).abs() < 1e-15);
        let c = ThetaPoint::new(0.5, DVector::from_element(1, -1.0), nu.clone()).unwrap();
        let parts = 0.3f64.powi(2) + 4.0 + rho_f_squared(&mu, &nu, &g).unwrap();
        assert!((d_f(&a, &c, &g).unwrap() - parts.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn theta_point_validates() {
        let mu = ParticleMeasure::dirac(DVector::zeros(2));
        assert!(ThetaPoint::new(0.0, DVector::zeros(1), mu.clone()).is_err());
        assert!(ThetaPoint::new(-1.0, DVector::zeros(2), mu).is_err());
    }
}
