//! Object-level SLAM with learned shape latents, wrapped-Gaussian viewpoint
//! estimates and soft data association solved by expectation-maximization.

pub mod association;
pub mod backend;
pub mod distributions;
pub mod geometry;
pub mod observation;
pub mod evaluation;
pub mod simulator;
