//! Confined gradient descent: every participant trains its own private model
//! from securely summed gradients, so no global model ever exists.

pub mod baselines;
pub mod data;
pub mod engine;
pub mod error;
pub mod fnn;
pub mod harness;
pub mod linalg;
pub mod privacy;
pub mod ring;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
