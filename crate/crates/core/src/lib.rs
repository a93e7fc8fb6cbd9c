//! Newton–Cotes integration of equivariant velocity predictors for
//! charged particle dynamics.

pub mod autodiff;
pub mod geometry;
pub mod models;
pub mod nbody;
pub mod quadrature;
pub mod rollout;
pub mod train;
