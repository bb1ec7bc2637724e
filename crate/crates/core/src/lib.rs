//! Numerical calculus on the Wasserstein space of probability measures.
//!
//! Measures are finite weighted point clouds ([`ParticleMeasure`]). On top of
//! them the crate provides:
//!
//! - exact discrete optimal transport (`W2` with the ½|x−y|² cost) and its
//!   Gaussian-smoothed variant,
//! - the Fourier–Wasserstein metric `ρ_F` and the Sobolev dual norm,
//! - the dyadic gauge function `ρ_σ` and a finite perturbed maximization,
//! - closed-form Lions derivatives of `ρ_F²` and of the auxiliary `𝓛`/`Ψ`
//!   functions together with a pushforward finite-difference oracle,
//! - matrix sandwich checks and jet assembly at doubled points,
//! - a simulator for a partially observed control problem whose conditional
//!   law evolves by a measure-valued SDE.

pub mod calculus;
pub mod error;
pub mod filtering;
pub mod fourier;
pub mod gauge;
pub mod ishii;
pub mod measures;
pub mod quadrature;
pub mod reduce;
pub mod rng;
pub mod samples;
pub mod transport;

pub use error::{Error, Result};
pub use fourier::{QuadratureGrid, ThetaPoint};
pub use gauge::GaugeParams;
pub use measures::ParticleMeasure;
pub use transport::CouplingPlan;
