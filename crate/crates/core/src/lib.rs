//! Probabilistic Perspective-n-Points.
//!
//! A weighted PnP problem is treated as a likelihood over poses. The crate
//! solves it with a robust Levenberg-Marquardt solver, represents the
//! posterior with decoupled proposal distributions, estimates the log
//! normalizer with adaptive multiple importance sampling, and differentiates
//! the resulting KL pose loss w.r.t. every correspondence parameter.

pub mod amis;
pub mod distributions;
pub mod error;
pub mod geometry;
pub mod likelihood;
pub mod loss;
pub mod par;
pub mod pnp;
pub mod quadrature;
pub mod synth;
pub mod toy;

pub use error::{Error, Result};
