//! Test-time expectation-maximization policy optimization on synthetic,
//! exactly verifiable arithmetic tasks.
//!
//! The numeric modules are generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the scalar to `f64`, which is what the training loops and the
//! CLI use.

pub mod bench;
pub mod emloop;
pub mod error;
pub mod nnet;
pub mod oracle;
pub mod rlcore;
pub mod rng;
pub mod scalar;
pub mod taskgen;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Policy = nnet::PolicyParams<f64>;
pub type Critic = nnet::CriticParams<f64>;
pub type Grad = nnet::GradBuffer<f64>;
