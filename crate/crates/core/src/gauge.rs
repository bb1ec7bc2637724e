//! The dyadic gauge function `ρ_σ`, the product gauge `d_σ` and a finite
//! Borwein–Preiss perturbed maximization.
//!
//! With `B₀ = (−1,1]^d`, `𝔓_l` the `2^{dl}` translates of `(−2^{−l},2^{−l}]^d`
//! covering `B₀`, `B_n = (−2^n,2^n]^d ∖ (−2^{n−1},2^{n−1}]^d` and
//! `δ_{n,l} = 2^{−(4n+2dl)}`:
//!
//! `ρ_σ²(μ,ν) = |m(μ)−m(ν)|² + Σ_n 2^{2n} Σ_l 2^{−2l} Σ_{B∈𝔓_l} [√(M_B² + δ²) − δ]`
//!
//! where `M_B = ((S₀μ − S₀ν) * N_σ)((2^n B) ∩ B_n)`.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::fourier::ThetaPoint;
use crate::measures::{HalfOpenBox, ParticleMeasure};
use crate::reduce::pairwise_sum;

/// Cells whose Gaussian mass bound falls below this are not evaluated.
pub const SKIP_THRESHOLD: f64 = 1e-14;

/// How many dyadic annuli beyond `n_max` enter the outer tail estimate.
const OUTER_TAIL_LEVELS: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaugeParams {
    /// Variance of the smoothing kernel `N_σ`.
    pub sigma: f64,
    pub n_max: u32,
    pub l_max: u32,
}

impl GaugeParams {
    pub fn new(sigma: f64, n_max: u32, l_max: u32) -> Result<Self> {
        let p = Self { sigma, n_max, l_max };
        p.validate()?;
        Ok(p)
    }

    /// `n_max = 8`; `l_max = 6` for `d = 1`, `4` for `d = 2` and `3` beyond.
    pub fn default_for(dim: usize) -> Self {
        let l_max = match dim {
            1 => 6,
            2 => 4,
            _ => 3,
        };
        Self { sigma: 1.0, n_max: 8, l_max }
    }

    /// Both cutoffs raised by one.
    pub fn refined(&self) -> Self {
        Self { n_max: self.n_max + 1, l_max: self.l_max + 1, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n_max > 40 || self.l_max > 20 {
            return Err(Error::InvalidParameter("gauge cutoffs too large".into()));
        }
        Ok(())
    }
}

/// `δ_{n,l} = 2^{−(4n+2dl)}`.
pub fn delta_nl(n: u32, l: u32, dim: usize) -> f64 {
    (2.0f64).powi(-((4 * n) as i32 + (2 * dim as u32 * l) as i32))
}

/// `√(m² + δ²) − δ`, written to avoid cancellation when `|m| ≪ δ`.
pub fn cell_term(mass: f64, delta: f64) -> f64 {
    let m2 = mass * mass;
    if m2 == 0.0 {
        return 0.0;
    }
    m2 / ((m2 + delta * delta).sqrt() + delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSum {
    pub n: u32,
    pub l: u32,
    /// `Σ_B [√(M_B²+δ²) − δ]`, before the `2^{2n−2l}` weight.
    pub raw: f64,
    /// `2^{2n−2l} · raw`.
    pub weighted: f64,
    pub cells_evaluated: usize,
    pub cells_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSigma {
    pub value: f64,
    pub mean_sq: f64,
    /// Bound on the discarded part of `ρ_σ²`.
    pub tail_sq: f64,
    /// `√(ρ_σ² + tail_sq) − ρ_σ`: bound on the discarded part of `ρ_σ`.
    pub tail_bound: f64,
    pub partials: Vec<PartialSum>,
}

impl RhoSigma {
    pub fn value_sq(&self) -> f64 {
        self.value * self.value
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,l,raw,weighted,cells_evaluated,cells_skipped\n");
        for p in &self.partials {
            s.push_str(&format!(
                "{},{},{:e},{:e},{},{}\n",
                p.n, p.l, p.raw, p.weighted, p.cells_evaluated, p.cells_skipped
            ));
        }
        s
    }
}

/// `P(X + Z ∉ (−a, a]^d)` summed over the cloud, by the union bound over
/// coordinates. Stable for large `a`.
fn outside_cube_bound(mu: &ParticleMeasure, sigma: f64, a: f64) -> f64 {
    let s = (2.0 * sigma).sqrt();
    let terms: Vec<f64> = mu
        .iter()
        .map(|(x, w)| {
            let mut p = 0.0;
            for j in 0..mu.dim() {
                p += 0.5 * erfc((a - x[j]) / s) + 0.5 * erfc((a + x[j]) / s);
            }
            w * p.min(1.0)
        })
        .collect();
    pairwise_sum(&terms)
}

/// Upper bound for `(μ * N_σ)(C)` with `C` convex: each atom contributes at
/// most the Gaussian mass of a half-space at its distance from `C`.
fn mass_bound(mu: &ParticleMeasure, sigma: f64, cell: &HalfOpenBox) -> f64 {
    let s = (2.0 * sigma).sqrt();
    mu.iter().map(|(x, w)| w * 0.5 * erfc(cell.distance_to(x) / s)).sum()
}

fn annulus_mass(mu: &ParticleMeasure, sigma: f64, n: u32, dim: usize) -> f64 {
    let outer = mu.gaussian_box_mass(sigma, &HalfOpenBox::centered_cube(dim, (2.0f64).powi(n as i32)));
    if n == 0 {
        return outer;
    }
    let inner = mu.gaussian_box_mass(sigma, &HalfOpenBox::centered_cube(dim, (2.0f64).powi(n as i32 - 1)));
    (outer - inner).max(0.0)
}

/// Lower corners of the level-`l` cells of `B₀`, in lexicographic order.
fn cell_boxes(dim: usize, n: u32, l: u32) -> Vec<HalfOpenBox> {
    let per_axis = 1usize << l;
    let side = (2.0f64).powi(1 - l as i32);
    let scale = (2.0f64).powi(n as i32);
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut lower = vec![0.0; dim];
            let mut upper = vec![0.0; dim];
            for j in (0..dim).rev() {
                let i = idx % per_axis;
                idx /= per_axis;
                let a = -1.0 + i as f64 * side;
                lower[j] = scale * a;
                upper[j] = scale * (a + side);
            }
            HalfOpenBox::new(lower, upper)
        })
        .collect()
}

enum CellOutcome {
    Term(f64),
    Skipped(f64),
}

fn region_mass(mu: &ParticleMeasure, sigma: f64, cell: &HalfOpenBox, inner: Option<&HalfOpenBox>) -> f64 {
    let full = mu.gaussian_box_mass(sigma, cell);
    match inner {
        None => full,
        Some(b) => full - mu.gaussian_box_mass(sigma, &cell.intersect(b)),
    }
}

/// Truncated `ρ_σ(μ, ν)` with per-level partial sums and a certified tail.
pub fn rho_sigma(mu: &ParticleMeasure, nu: &ParticleMeasure, params: &GaugeParams) -> Result<RhoSigma> {
    params.validate()?;
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: nu.dim() });
    }
    let dim = mu.dim();
    let sigma = params.sigma;
    let mean_sq = (mu.mean() - nu.mean()).norm_squared();
    let a = mu.center();
    let b = nu.center();

    let mut partials = Vec::new();
    let mut skipped_tail = Vec::new();
    let mut l_tail = Vec::new();
    for n in 0..=params.n_max {
        let inner = (n > 0).then(|| HalfOpenBox::centered_cube(dim, (2.0f64).powi(n as i32 - 1)));
        let level_weight_n = (4.0f64).powi(n as i32);
        for l in 0..=params.l_max {
            let delta = delta_nl(n, l, dim);
            let weight = level_weight_n * (4.0f64).powi(-(l as i32));
            let outcomes: Vec<CellOutcome> = cell_boxes(dim, n, l)
                .into_par_iter()
                .map(|cell| {
                    if let Some(inn) = &inner {
                        // Cells inside the inner cube carry no annulus mass.
                        if cell.lower.iter().zip(&cell.upper).all(|(lo, hi)| {
                            *lo >= inn.lower[0] && *hi <= inn.upper[0]
                        }) {
                            return CellOutcome::Term(0.0);
                        }
                    }
                    let bound = mass_bound(&a, sigma, &cell) + mass_bound(&b, sigma, &cell);
                    if bound < SKIP_THRESHOLD {
                        return CellOutcome::Skipped(bound);
                    }
                    let m = region_mass(&a, sigma, &cell, inner.as_ref())
                        - region_mass(&b, sigma, &cell, inner.as_ref());
                    CellOutcome::Term(cell_term(m, delta))
                })
                .collect();
            let mut terms = Vec::with_capacity(outcomes.len());
            let mut skipped = 0;
            for o in outcomes {
                match o {
                    CellOutcome::Term(t) => terms.push(t),
                    CellOutcome::Skipped(bd) => {
                        skipped += 1;
                        skipped_tail.push(weight * bd);
                    }
                }
            }
            let raw = pairwise_sum(&terms);
            partials.push(PartialSum {
                n,
                l,
                raw,
                weighted: weight * raw,
                cells_evaluated: terms.len(),
                cells_skipped: skipped,
            });
        }
        // Levels l > l_max: Σ_B |M_B| ≤ mass of the annulus under both measures.
        let annulus = annulus_mass(&a, sigma, n, dim) + annulus_mass(&b, sigma, n, dim);
        l_tail.push(level_weight_n * annulus * (4.0 / 3.0) * (4.0f64).powi(-(params.l_max as i32 + 1)));
    }
    let mut n_tail = Vec::new();
    for n in params.n_max + 1..=params.n_max + OUTER_TAIL_LEVELS {
        let half = (2.0f64).powi(n as i32 - 1);
        let mass = outside_cube_bound(&a, sigma, half) + outside_cube_bound(&b, sigma, half);
        n_tail.push((4.0f64).powi(n as i32) * (4.0 / 3.0) * mass);
    }

    let weighted: Vec<f64> = partials.iter().map(|p| p.weighted).collect();
    let value_sq = mean_sq + pairwise_sum(&weighted);
    let tail_sq = pairwise_sum(&skipped_tail) + pairwise_sum(&l_tail) + pairwise_sum(&n_tail);
    let value = value_sq.sqrt();
    let tail_bound = (value_sq + tail_sq).sqrt() - value;
    Ok(RhoSigma { value, mean_sq, tail_sq, tail_bound, partials })
}

/// `d_σ²(θ, θ̃) = |t − t̃|² + |y − ỹ|² + ρ_σ²(μ, μ̃)`.
pub fn d_sigma_squared(a: &ThetaPoint, b: &ThetaPoint, params: &GaugeParams) -> Result<f64> {
    if a.y.len() != b.y.len() {
        return Err(Error::DimensionMismatch { expected: a.y.len(), got: b.y.len() });
    }
    let dt = a.t - b.t;
    Ok(dt * dt + (&a.y - &b.y).norm_squared() + rho_sigma(&a.mu, &b.mu, params)?.value_sq())
}

pub fn d_sigma(a: &ThetaPoint, b: &ThetaPoint, params: &GaugeParams) -> Result<f64> {
    Ok(d_sigma_squared(a, b, params)?.sqrt())
}

/// Evidence that the returned pair is a strict maximizer of the perturbed
/// objective `G − δ(φ + φ̃)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Candidate indices of the distinct anchors `θ^0, …, θ^J`; all later
    /// anchors equal `θ^J`, the maximizer.
    pub anchors: Vec<usize>,
    pub sup_value: f64,
    pub start_value: f64,
    pub max_value: f64,
    /// `δ(φ(θ*) + φ̃(θ̃*))`.
    pub penalty_at_max: f64,
    pub perturbed_value: f64,
    /// `d²_σ(θ*,θ^j)+d²_σ(θ̃*,θ̃^j)` against `κ/(δ 2^j)` for each anchor.
    pub anchor_distances: Vec<(f64, f64)>,
    pub anchor_bounds_hold: bool,
    /// `G(θ⁰) ≤ G(θ*) − δ(φ(θ*)+φ̃(θ̃*))`.
    pub improvement_holds: bool,
    /// Perturbed value at the maximizer minus the best other perturbed
    /// value; `None` for a single candidate.
    pub strict_margin: Option<f64>,
}

impl Certificate {
    pub fn holds(&self) -> bool {
        self.anchor_bounds_hold && self.improvement_holds && self.strict_margin.is_none_or(|m| m > 0.0)
    }
}

/// Perturbed maximization on an indexed candidate set. `dist2(i, j)` is the
/// doubled gauge between candidates `i` and `j`.
pub fn perturbed_maximize_indexed<D>(values: &[f64], dist2: D, delta: f64, kappa: f64) -> Result<(usize, Certificate)>
where
    D: Fn(usize, usize) -> Result<f64>,
{
    if values.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(delta > 0.0 && kappa > 0.0) {
        return Err(Error::InvalidParameter("delta and kappa must be positive".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("objective at candidate {i}")));
    }
    let n = values.len();
    let sup = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = values.iter().position(|&v| v > sup - kappa).expect("sup is attained");

    // penalty[z] = Σ_{i<anchors.len()} 2^{-i} d2(z, anchor_i)
    let mut anchors = vec![start];
    let mut penalty: Vec<f64> = (0..n).map(|z| dist2(z, start)).collect::<Result<_>>()?;
    let objective = |pen: &[f64], z: usize| values[z] - delta * pen[z];
    let max_rounds = 64;
    loop {
        let current = *anchors.last().unwrap();
        let level = objective(&penalty, current);
        let mut best = current;
        let mut best_val = level;
        for z in 0..n {
            let val = objective(&penalty, z);
            if val >= level && val > best_val {
                best = z;
                best_val = val;
            }
        }
        if best == current || anchors.len() >= max_rounds {
            break;
        }
        let w = (0.5f64).powi(anchors.len() as i32);
        for (z, p) in penalty.iter_mut().enumerate() {
            *p += w * dist2(z, best)?;
        }
        anchors.push(best);
    }
    let star = *anchors.last().unwrap();
    let j_last = anchors.len() - 1;

    // Every anchor beyond J is θ*, so the series tail is 2^{-J} d2(·, θ*).
    let tail_w = (0.5f64).powi(j_last as i32);
    let full_penalty = |z: usize| -> Result<f64> {
        let mut p = 0.0;
        for (j, &a) in anchors.iter().enumerate().take(j_last) {
            p += (0.5f64).powi(j as i32) * dist2(z, a)?;
        }
        Ok(p + 2.0 * tail_w * dist2(z, star)?)
    };
    let penalty_star = delta * full_penalty(star)?;
    let perturbed_star = values[star] - penalty_star;
    let mut others = f64::NEG_INFINITY;
    for z in (0..n).filter(|&z| z != star) {
        others = others.max(values[z] - delta * full_penalty(z)?);
    }
    let strict_margin = (n > 1).then_some(perturbed_star - others);

    let mut anchor_distances = Vec::with_capacity(anchors.len());
    let mut anchor_bounds_hold = true;
    for (j, &a) in anchors.iter().enumerate() {
        let d = dist2(star, a)?;
        let bound = kappa / (delta * (2.0f64).powi(j as i32));
        anchor_bounds_hold &= d <= bound;
        anchor_distances.push((d, bound));
    }
    let improvement_holds = values[start] <= perturbed_star;
    Ok((
        star,
        Certificate {
            anchors,
            sup_value: sup,
            start_value: values[start],
            max_value: values[star],
            penalty_at_max: penalty_star,
            perturbed_value: perturbed_star,
            anchor_distances,
            anchor_bounds_hold,
            improvement_holds,
            strict_margin,
        },
    ))
}

/// Perturbed maximization of `G` over candidate pairs, with the doubled gauge
/// `d²_σ(θ,θ') + d²_σ(θ̃,θ̃')`.
pub fn perturbed_maximize<G>(
    g: G,
    candidates: &[(ThetaPoint, ThetaPoint)],
    delta: f64,
    kappa: f64,
    params: &GaugeParams,
) -> Result<((ThetaPoint, ThetaPoint), Certificate)>
where
    G: Fn(&ThetaPoint, &ThetaPoint) -> f64 + Sync,
{
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let values: Vec<f64> = candidates.par_iter().map(|(a, b)| g(a, b)).collect();
    let cache: Mutex<HashMap<(usize, usize), f64>> = Mutex::new(HashMap::new());
    let dist2 = |i: usize, j: usize| -> Result<f64> {
        if i == j {
            return Ok(0.0);
        }
        let key = (i.min(j), i.max(j));
        if let Some(v) = cache.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let (a, b) = &candidates[i];
        let (c, d) = &candidates[j];
        let v = d_sigma_squared(a, c, params)? + d_sigma_squared(b, d, params)?;
        cache.lock().unwrap().insert(key, v);
        Ok(v)
    };
    let (idx, cert) = perturbed_maximize_indexed(&values, dist2, delta, kappa)?;
    Ok((candidates[idx].clone(), cert))
}
