//! Riemannian motion policies with operator-driven task adaptation, simulated
//! on a cylinder inspection scenario.

pub mod adaptation;
pub mod batch;
pub mod geometry;
pub mod metrics;
pub mod policies;
pub mod rmp;
pub mod operators;
pub mod scenario;
pub mod sim;
pub mod trace;
