//! Virtual rigid body formations: constraint synthesis, aggregated rigid-body
//! dynamics, wrench allocation, LQR guidance and mission simulation.

pub mod allocation;
pub mod attitude;
pub mod care;
pub mod constraint;
pub mod dynamics;
pub mod guidance;
pub mod linalg;
pub mod output;
pub mod scenario;
pub mod sim;
