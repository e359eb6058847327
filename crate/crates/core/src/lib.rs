//! Fisher information leakage (dFIL) of noisy instance encoders.
//!
//! The crate covers the whole audit loop: exact Jacobians of smooth encoders
//! ([`diff`]), the Fisher information and noise calibration of Gaussian-noise
//! encoders ([`encoders`]), prior Fisher information from closed forms or
//! score matching ([`priors`]), reconstruction-error lower bounds
//! ([`bounds`]), reconstruction attacks that test those bounds
//! ([`attacks`]), and a small split-inference simulator ([`splitsim`]).

pub mod attacks;
pub mod bounds;
pub mod diff;
pub mod encoders;
mod error;
pub mod exec;
pub mod priors;
pub mod rng;
pub mod splitsim;
mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::Tensor;

pub use nalgebra::{DMatrix, DVector};
