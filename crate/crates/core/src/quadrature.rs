//! Frequency-space quadrature for integrals against `(1+|k|²)^{−λ} dk`.
//!
//! The radius is mapped by `r = tan θ`, which turns the weight into
//! `tan^{d−1}θ · cos^{2λ−2}θ dθ` on `[0, atan R]`; composite Gauss–Legendre
//! panels are used in `θ`. Directions use a symmetric pair of nodes in
//! `d = 1`, uniform angles in `d = 2` and a Gauss–Legendre × uniform
//! azimuth product in `d = 3`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gauss–Legendre points per radial panel.
const PANEL_POINTS: usize = 10;
/// Target for the discarded mass beyond the truncation radius.
const TAIL_TARGET: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScheme {
    /// `d = 1`: mapped Gauss–Legendre on both half-lines.
    MappedLine,
    /// `d = 2`: mapped radial Gauss–Legendre × uniform angles.
    PolarProduct,
    /// `d = 3`: mapped radial × Gauss–Legendre in cos(polar) × uniform azimuth.
    SphericalProduct,
}

/// Nodes `k_j` and weights `q_j` with `Σ q_j φ(k_j) ≈ ∫ φ(k)(1+|k|²)^{−λ} dk`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub dim: usize,
    pub lambda: u32,
    pub level: u32,
    pub scheme: GridScheme,
    pub radius: f64,
    pub nodes: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// Upper bound for `∫_{|k|>R} (1+|k|²)^{−λ} dk`.
    pub estimated_tail: f64,
}

/// JSON layout `{"lambda", "nodes", "weights", "tail", ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFile {
    pub dim: usize,
    pub lambda: u32,
    pub level: u32,
    pub scheme: GridScheme,
    pub radius: f64,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub tail: f64,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Default `λ = d + 7`.
    pub fn default_lambda(dim: usize) -> u32 {
        dim as u32 + 7
    }

    pub fn integrate<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> f64 {
        let terms: Vec<f64> = self.nodes.iter().zip(&self.weights).map(|(k, q)| q * f(k)).collect();
        crate::reduce::pairwise_sum(&terms)
    }

    pub fn to_file(&self) -> GridFile {
        GridFile {
            dim: self.dim,
            lambda: self.lambda,
            level: self.level,
            scheme: self.scheme,
            radius: self.radius,
            nodes: self.nodes.iter().map(|k| k.iter().copied().collect()).collect(),
            weights: self.weights.clone(),
            tail: self.estimated_tail,
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("grid serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: GridFile = serde_json::from_str(s)?;
        if f.nodes.len() != f.weights.len() {
            return Err(Error::InvalidParameter("grid nodes/weights length mismatch".into()));
        }
        for k in &f.nodes {
            if k.len() != f.dim {
                return Err(Error::DimensionMismatch { expected: f.dim, got: k.len() });
            }
        }
        Ok(Self {
            dim: f.dim,
            lambda: f.lambda,
            level: f.level,
            scheme: f.scheme,
            radius: f.radius,
            nodes: f.nodes.into_iter().map(DVector::from_vec).collect(),
            weights: f.weights,
            estimated_tail: f.tail,
        })
    }
}

/// Surface area of the unit sphere `S^{d−1}`.
pub fn sphere_area(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => {
            let a = dim as f64 / 2.0;
            2.0 * PI.powf(a) / statrs::function::gamma::gamma(a)
        }
    }
}

/// `|S^{d−1}| R^{d−2λ} / (2λ − d)`, an upper bound for the weight mass
/// outside the ball of radius `R`.
pub fn tail_bound(dim: usize, lambda: u32, radius: f64) -> f64 {
    let p = 2.0 * lambda as f64 - dim as f64;
    sphere_area(dim) * radius.powf(-p) / p
}

fn truncation_radius(dim: usize, lambda: u32) -> f64 {
    let mut r: f64 = 20.0;
    while tail_bound(dim, lambda, r) > TAIL_TARGET && r < 1e8 {
        r *= 1.25;
    }
    r
}

/// Builds the frequency grid. `level` controls resolution; each increment
/// doubles the number of nodes in every direction.
pub fn build_grid(dim: usize, lambda: u32, level: u32) -> Result<QuadratureGrid> {
    if !(1..=3).contains(&dim) {
        return Err(Error::UnsupportedDimension(dim));
    }
    if level < 1 {
        return Err(Error::InvalidParameter("grid level must be at least 1".into()));
    }
    if (lambda as f64) < dim as f64 / 2.0 + 0.5 {
        return Err(Error::InvalidParameter(format!("lambda {lambda} too small for d = {dim}")));
    }
    if level > 12 {
        return Err(Error::InvalidParameter("grid level above 12 is not supported".into()));
    }
    let radius = truncation_radius(dim, lambda);
    let theta_max = radius.atan();
    let panels = 1usize << level.saturating_sub(2);
    let (radial_nodes, radial_weights) = composite_gauss_legendre(0.0, theta_max, panels, PANEL_POINTS);
    let two_lambda_m2 = 2 * lambda as i32 - 2;
    let radial: Vec<(f64, f64)> = radial_nodes
        .iter()
        .zip(&radial_weights)
        .map(|(&th, &w)| {
            let r = th.tan();
            let jac = th.cos().powi(two_lambda_m2) * r.powi(dim as i32 - 1);
            (r, w * jac)
        })
        .collect();

    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let scheme = match dim {
        1 => {
            for &(r, w) in &radial {
                nodes.push(DVector::from_element(1, r));
                weights.push(w);
                nodes.push(DVector::from_element(1, -r));
                weights.push(w);
            }
            GridScheme::MappedLine
        }
        2 => {
            let n_angle = 1usize << (level + 1);
            let dphi = 2.0 * PI / n_angle as f64;
            for &(r, w) in &radial {
                for a in 0..n_angle {
                    let phi = (a as f64 + 0.5) * dphi;
                    nodes.push(DVector::from_vec(vec![r * phi.cos(), r * phi.sin()]));
                    weights.push(w * dphi);
                }
            }
            GridScheme::PolarProduct
        }
        _ => {
            let n_polar = 1usize << level.saturating_sub(1).max(1);
            let n_azimuth = 1usize << level;
            let (us, uw) = gauss_legendre(n_polar);
            let dphi = 2.0 * PI / n_azimuth as f64;
            for &(r, w) in &radial {
                for (u, wu) in us.iter().zip(&uw) {
                    let s = (1.0 - u * u).max(0.0).sqrt();
                    for a in 0..n_azimuth {
                        let phi = (a as f64 + 0.5) * dphi;
                        nodes.push(DVector::from_vec(vec![r * s * phi.cos(), r * s * phi.sin(), r * u]));
                        weights.push(w * wu * dphi);
                    }
                }
            }
            GridScheme::SphericalProduct
        }
    };

    Ok(QuadratureGrid {
        dim,
        lambda,
        level,
        scheme,
        radius,
        nodes,
        weights,
        estimated_tail: tail_bound(dim, lambda, radius),
    })
}

/// Gauss–Legendre nodes and weights on `[−1, 1]` (Newton on the
/// three-term recurrence).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d.is_finite() { d } else { dp };
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let (p, pm1) = if n == 0 { (1.0, 0.0) } else if n == 1 { (z, 1.0) } else { (p1, p0) };
    let d = n as f64 * (z * p - pm1) / (z * z - 1.0);
    (p, d)
}

/// `panels` equal Gauss–Legendre panels on `[a, b]`.
pub fn composite_gauss_legendre(a: f64, b: f64, panels: usize, points: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(points);
    let h = (b - a) / panels as f64;
    let mut xs = Vec::with_capacity(panels * points);
    let mut ws = Vec::with_capacity(panels * points);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            xs.push(lo + 0.5 * h * (xi + 1.0));
            ws.push(0.5 * h * wi);
        }
    }
    (xs, ws)
}

/// Probabilists' Gauss–Hermite rule: `Σ w_i f(z_i) ≈ E f(Z)`, `Z ~ N(0,1)`.
/// Golub–Welsch on the Jacobi matrix.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove eigen-solver asymmetry
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..n / 2 {
        let k = n - 1 - i;
        let z = 0.5 * (nodes[k] - nodes[i]);
        nodes[i] = -z;
        nodes[k] = z;
        let w = 0.5 * (weights[i] + weights[k]);
        weights[i] = w;
        weights[k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert!((s - 2.0 / 13.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn hermite_rule_matches_normal_moments() {
        let (z, w) = gauss_hermite_normal(5);
        let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
        let m4: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(4)).sum();
        let m8: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(8)).sum();
        assert!((m2 - 1.0).abs() < 1e-13);
        assert!((m4 - 3.0).abs() < 1e-12);
        assert!((m8 - 105.0).abs() < 1e-10);
        let (z3, w3) = gauss_hermite_normal(3);
        assert!((z3[2] - 3f64.sqrt()).abs() < 1e-14);
        assert!((w3[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn weights_are_positive_and_dims_checked() {
        for d in 1..=3 {
            let g = build_grid(d, d as u32 + 7, 3).unwrap();
            assert!(g.weights.iter().all(|&q| q > 0.0));
            assert!(g.nodes.iter().all(|k| k.len() == d));
        }
        assert!(matches!(build_grid(4, 11, 3), Err(Error::UnsupportedDimension(4))));
        assert!(build_grid(1, 8, 0).is_err());
    }

    #[test]
    fn doubling_level_doubles_nodes_per_direction() {
        let a = build_grid(1, 8, 4).unwrap();
        let b = build_grid(1, 8, 5).unwrap();
        assert_eq!(b.len(), 2 * a.len());
        let a2 = build_grid(2, 9, 4).unwrap();
        let b2 = build_grid(2, 9, 5).unwrap();
        assert_eq!(b2.len(), 4 * a2.len());
    }

    #[test]
    fn tail_is_reported() {
        let g = build_grid(2, 9, 3).unwrap();
        assert!(g.estimated_tail <= TAIL_TARGET);
        assert!((g.estimated_tail - tail_bound(2, 9, g.radius)).abs() == 0.0);
    }

    #[test]
    fn json_round_trip() {
        let g = build_grid(2, 9, 2).unwrap();
        let back = QuadratureGrid::from_json_str(&g.to_json_string()).unwrap();
        assert_eq!(back, g);
        let v: serde_json::Value = serde_json::from_str(&g.to_json_string()).unwrap();
        for key in ["lambda", "nodes", "weights", "tail"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
