//! Adversarial traffic-scenario generation built on a reversible motion-token
//! space and a bidirectional autoregressive motion model.
//!
//! The crate is organized as:
//! - [`scenario`]: data model, JSON I/O, preprocessing, synthetic data
//! - [`kinematics`]: token space and exactly invertible midpoint dynamics
//! - [`model`]: scene encoder + motion decoder, training, sampling, rollout
//! - [`adversary`]: collision-state sampling, reverse reconstruction, filtering
//! - [`metrics`]: collision checks, displacement/diversity/distribution metrics
//! - [`plot`]: bird's-eye SVG rendering

pub mod adversary;
pub mod geometry;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod scenario;
