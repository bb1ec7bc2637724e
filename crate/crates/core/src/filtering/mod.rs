//! A partially observed control problem whose conditional law is a
//! measure-valued diffusion.
//!
//! The state solves `dX = b(X,α)ds + σ(X,α)dV + σ̃(α)dW` with controls adapted
//! to `W` alone; `m_s` is the law of `X_s` given `W`.

pub mod checks;
pub mod control;
pub mod flow;
pub mod model;
pub mod value;

pub use checks::{
    flow_lipschitz_check, hamiltonian_inf, hamiltonian_k, ito_generator, ito_mc_rate, ito_residual, quadrature_expectation,
    weak_residual, FlowLipschitzReport, ItoRateReport, ItoReport, WeakResidualReport,
};
pub use control::{Adaptedness, ControlPath};
pub use flow::{cost_j, path_costs, simulate_flow, ConditionalFlow, Estimate, ParticleState};
pub use model::FilterModel;
pub use value::{dpp_check, value_estimate, value_lipschitz, DppConfig, DppReport, McConfig, ValueEstimate};
