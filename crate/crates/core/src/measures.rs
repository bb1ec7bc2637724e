//! Particle representation of probability measures on ℝ^d.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::reduce::pairwise_sum;
use crate::transport::{self, CouplingPlan};

/// Tolerance on the total mass of a measure.
pub const MASS_TOL: f64 = 1e-12;

/// A finite weighted point cloud `μ = Σ_i w_i δ_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMeasure {
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
    dim: usize,
}

impl ParticleMeasure {
    pub fn new(points: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if points.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMeasure("non-finite coordinate".into()));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total = pairwise_sum(&weights);
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { points, weights, dim })
    }

    /// Equal weights on the given points.
    pub fn uniform(points: Vec<DVector<f64>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyMeasure);
        }
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn dirac(point: DVector<f64>) -> Self {
        Self::new(vec![point], vec![1.0]).expect("a single finite point is a valid measure")
    }

    /// Convenience constructor for one-dimensional clouds `[(x, w), ...]`.
    pub fn from_pairs_1d(pairs: &[(f64, f64)]) -> Result<Self> {
        let points = pairs.iter().map(|&(x, _)| DVector::from_element(1, x)).collect();
        let weights = pairs.iter().map(|&(_, w)| w).collect();
        Self::new(points, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DVector<f64>, f64)> {
        self.points.iter().zip(self.weights.iter().copied())
    }

    /// True when weights are equal (to 1e-15).
    pub fn is_uniform(&self) -> bool {
        let w0 = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-15)
    }

    /// `m(μ) = ∫ x μ(dx)`.
    pub fn mean(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for j in 0..self.dim {
            let terms: Vec<f64> = self.iter().map(|(x, w)| w * x[j]).collect();
            out[j] = pairwise_sum(&terms);
        }
        out
    }

    /// `V(μ) = ∫ (x − m)(x − m)ᵀ μ(dx)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let centered: Vec<DVector<f64>> = self.points.iter().map(|x| x - &m).collect();
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for a in 0..self.dim {
            for b in a..self.dim {
                let terms: Vec<f64> = centered
                    .iter()
                    .zip(&self.weights)
                    .map(|(c, w)| w * c[a] * c[b])
                    .collect();
                let v = pairwise_sum(&terms);
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }

    /// `∫ |x|² μ(dx)`.
    pub fn second_moment(&self) -> f64 {
        let terms: Vec<f64> = self.iter().map(|(x, w)| w * x.norm_squared()).collect();
        pairwise_sum(&terms)
    }

    /// Centered part `S₀(μ) = (x ↦ x − m(μ))_♯ μ`.
    pub fn center(&self) -> Self {
        let m = self.mean();
        self.translate(&(-m))
    }

    /// `(x ↦ x + c)_♯ μ`.
    pub fn translate(&self, shift: &DVector<f64>) -> Self {
        Self {
            points: self.points.iter().map(|x| x + shift).collect(),
            weights: self.weights.clone(),
            dim: self.dim,
        }
    }

    /// `T_♯ μ`; weights are preserved.
    pub fn pushforward<F>(&self, map: F) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let points: Vec<DVector<f64>> = self.points.iter().map(&map).collect();
        let dim = points[0].len();
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("pushforward map produced a non-finite point".into()));
            }
        }
        Ok(Self { points, weights: self.weights.clone(), dim })
    }

    /// `(μ * N_σ)(box)` where `N_σ` has covariance `σ I_d`.
    pub fn gaussian_box_mass(&self, sigma: f64, region: &HalfOpenBox) -> f64 {
        assert!(sigma > 0.0, "sigma must be positive");
        assert_eq!(region.dim(), self.dim, "box dimension");
        if region.is_degenerate() {
            return 0.0;
        }
        let sd = sigma.sqrt();
        let terms: Vec<f64> = self
            .iter()
            .map(|(x, w)| {
                let mut p = w;
                for j in 0..self.dim {
                    p *= normal_interval((region.lower[j] - x[j]) / sd, (region.upper[j] - x[j]) / sd);
                    if p == 0.0 {
                        break;
                    }
                }
                p
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// Exact `W₂` under the ½|x−y|² cost, with an optimal plan.
    pub fn w2(&self, other: &Self) -> Result<(f64, CouplingPlan)> {
        transport::w2(self, other)
    }

    /// `W₂(μ * N_σ, ν * N_σ)` with `n_smooth` common Gaussian offsets per
    /// particle. Offsets come in antithetic pairs and are shared by both
    /// measures, so translates stay exact translates after smoothing.
    pub fn w2_sigma(&self, other: &Self, sigma: f64, n_smooth: usize, seed: u64) -> Result<f64> {
        if sigma <= 0.0 {
            return Err(Error::InvalidParameter("sigma must be positive".into()));
        }
        if n_smooth == 0 {
            return Err(Error::InvalidParameter("n_smooth must be positive".into()));
        }
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        let offsets = gaussian_offsets(self.dim, sigma, n_smooth, seed);
        let a = self.smooth_with(&offsets);
        let b = other.smooth_with(&offsets);
        Ok(transport::w2(&a, &b)?.0)
    }

    fn smooth_with(&self, offsets: &[DVector<f64>]) -> Self {
        let s = offsets.len() as f64;
        let mut points = Vec::with_capacity(self.len() * offsets.len());
        let mut weights = Vec::with_capacity(self.len() * offsets.len());
        for (x, w) in self.iter() {
            for z in offsets {
                points.push(x + z);
                weights.push(w / s);
            }
        }
        Self { points, weights, dim: self.dim }
    }

    pub fn to_file(&self) -> MeasureFile {
        MeasureFile {
            dim: self.dim,
            points: self.points.iter().map(|p| p.iter().copied().collect()).collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: MeasureFile = serde_json::from_str(s)?;
        file.into_measure()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("measure serializes")
    }
}

/// On-disk measure format `{"dim": d, "points": [[...]], "weights": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeasureFile {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl MeasureFile {
    pub fn into_measure(self) -> Result<ParticleMeasure> {
        for p in &self.points {
            if p.len() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, got: p.len() });
            }
        }
        let points = self.points.into_iter().map(DVector::from_vec).collect();
        ParticleMeasure::new(points, self.weights)
    }
}

/// Axis-aligned half-open box `(a₁,b₁] × … × (a_d,b_d]`. Infinite bounds
/// are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfOpenBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl HalfOpenBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper }
    }

    /// `(−h, h]^d`.
    pub fn centered_cube(dim: usize, half_width: f64) -> Self {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(a, b)| a >= b)
    }

    pub fn intersect(&self, other: &Self) -> Self {
        Self::new(
            self.lower.iter().zip(&other.lower).map(|(a, b)| a.max(*b)).collect(),
            self.upper.iter().zip(&other.upper).map(|(a, b)| a.min(*b)).collect(),
        )
    }

    /// Euclidean distance from a point to the closure of the box.
    pub fn distance_to(&self, x: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for j in 0..self.dim() {
            let d = if x[j] < self.lower[j] {
                self.lower[j] - x[j]
            } else if x[j] > self.upper[j] {
                x[j] - self.upper[j]
            } else {
                0.0
            };
            s += d * d;
        }
        s.sqrt()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `P(lo < Z ≤ hi)` for a standard normal, computed without cancellation in
/// either tail.
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    let r2 = std::f64::consts::SQRT_2;
    let p = if lo >= 0.0 {
        0.5 * (erfc(lo / r2) - erfc(hi / r2))
    } else if hi <= 0.0 {
        0.5 * (erfc(-hi / r2) - erfc(-lo / r2))
    } else {
        1.0 - 0.5 * erfc(-lo / r2) - 0.5 * erfc(hi / r2)
    };
    p.max(0.0)
}

/// `n` offsets from `N(0, σ I_d)` in antithetic pairs (exact zero mean).
pub fn gaussian_offsets(dim: usize, sigma: f64, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = crate::rng::stream(seed, 0x5eed_0ff5);
    let sd = sigma.sqrt();
    let mut out = Vec::with_capacity(n);
    while out.len() + 1 < n {
        let z: DVector<f64> =
            DVector::from_fn(dim, |_, _| sd * { let z: f64 = StandardNormal.sample(&mut rng); z });
        out.push(z.clone());
        out.push(-z);
    }
    if out.len() < n {
        out.push(DVector::zeros(dim));
    }
    out
}
