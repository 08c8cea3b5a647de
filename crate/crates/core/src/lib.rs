//! Compliant-contact simulation, noisy data generation, from-scratch neural
//! dynamics models and evaluation tooling for studying how contact
//! stiffness affects learned dynamics.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod math;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod sim1d;
pub mod training;

pub use error::{Error, Result};
