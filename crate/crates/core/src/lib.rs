//! Sheaf diffusion networks on graphs: a small reverse-mode autodiff engine,
//! cellular sheaf operators, learned diffusion layers, a synthetic
//! community benchmark and a full-batch training harness.

pub mod benchmark;
pub mod error;
mod fsutil;
pub mod gradcheck;
pub mod layers;
pub mod param;
pub mod rng;
pub mod sheaf;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
