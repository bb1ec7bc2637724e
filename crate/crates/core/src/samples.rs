//! Random and structured test measures.

use nalgebra::DVector;
use rand::Rng;

use crate::measures::ParticleMeasure;

/// `n` points uniform in `[−scale, scale]^d` with weights drawn from
/// `[0.2, 1]` and normalized.
pub fn random_measure<R: Rng + ?Sized>(rng: &mut R, dim: usize, n: usize, scale: f64) -> ParticleMeasure {
    let points: Vec<DVector<f64>> =
        (0..n).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-scale..scale))).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let drift: f64 = 1.0 - weights.iter().sum::<f64>();
    weights[0] += drift;
    ParticleMeasure::new(points, weights).expect("normalized weights")
}

/// `n` equally weighted points uniform in `[−scale, scale]^d`.
pub fn random_uniform_measure<R: Rng + ?Sized>(rng: &mut R, dim: usize, n: usize, scale: f64) -> ParticleMeasure {
    let points = (0..n).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-scale..scale))).collect();
    ParticleMeasure::uniform(points).expect("nonempty")
}

/// `μ_n = (1 − 1/n) δ₀ + (1/2n) δ_{−√n e₁} + (1/2n) δ_{√n e₁}`: mean zero and
/// covariance `e₁e₁ᵀ` for every `n`, yet `μ_n → δ₀` weakly.
pub fn spreading_sequence(dim: usize, n: u32) -> ParticleMeasure {
    let nf = n as f64;
    let mut e1 = DVector::zeros(dim);
    e1[0] = nf.sqrt();
    ParticleMeasure::new(vec![DVector::zeros(dim), -e1.clone(), e1], vec![1.0 - 1.0 / nf, 0.5 / nf, 0.5 / nf])
        .expect("valid weights")
}

/// Smooth bounded random vector field `x ↦ a + B x + c ∘ sin(ω x)`.
#[derive(Debug, Clone)]
pub struct RandomField {
    pub a: DVector<f64>,
    pub b: nalgebra::DMatrix<f64>,
    pub c: DVector<f64>,
    pub omega: f64,
}

impl RandomField {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self {
            a: DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)),
            b: nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0)),
            c: DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)),
            omega: rng.random_range(0.5..2.0),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a + &self.b * x + self.c.component_mul(&x.map(|v| (self.omega * v).sin()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn spreading_sequence_moments() {
        let mu = spreading_sequence(2, 4);
        assert!(mu.mean().norm() < 1e-15);
        let mut e = DMatrix::zeros(2, 2);
        e[(0, 0)] = 1.0;
        assert!((mu.covariance() - e).abs().max() < 1e-12);
        // The n = 4 member is (3/4)δ₀ + (1/8)δ_{−2e₁} + (1/8)δ_{2e₁}.
        assert_eq!(mu.weights(), &[0.75, 0.125, 0.125]);
        assert_eq!(mu.points()[2][0], 2.0);
    }

    #[test]
    fn random_measures_are_valid() {
        let mut rng = crate::rng::stream(1, 0);
        for _ in 0..20 {
            let mu = random_measure(&mut rng, 2, 5, 1.0);
            assert!((mu.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
