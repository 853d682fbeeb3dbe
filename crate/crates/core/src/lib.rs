//! Continual-learning engine built around sparse coding and multiple memory
//! systems: k-WTA sparse activations, heterogeneous and semantic dropout, a
//! reservoir episodic buffer, and an EMA-consolidated long-term model.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dropout;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod memory;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
