//! Denoising Levy probabilistic models.
//!
//! Diffusion models driven by isotropic alpha-stable noise instead of
//! Gaussian noise. The crate covers stable samplers, noise schedules, the
//! forward bridge and backward posterior, a small time-conditioned MLP noise
//! predictor with hand-written gradients, training, stochastic and
//! deterministic samplers, evaluation metrics and a statistical verification
//! suite.

pub mod bridge;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod stable;
pub mod stats;
pub mod train;
pub mod verify;

pub use error::{DlpmError, Result};
