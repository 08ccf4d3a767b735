//! Randomized-to-canonical latent dynamics modelling and visual MPC on a
//! deterministic toy valve-rotation world.
//!
//! The crate is organized as:
//!
//! - [`diffcore`] — reverse-mode differentiation over dense tensors
//! - [`nets`] — encoder, decoder, dynamics-parameter network, ensemble
//! - [`lgssm`] — time-varying linear-Gaussian state-space inference
//! - [`elbo`] — the two training objectives and the training loop
//! - [`valveworld`] — environment, dual renderer, data collection
//! - [`planner`] — cross-entropy-method planning and the MPC executive
//! - [`experiments`] — evaluation studies and reports
//! - [`io`] — file formats, configuration, checkpoints

pub mod diffcore;
pub mod elbo;
pub mod error;
pub mod experiments;
pub mod io;
pub mod lgssm;
pub mod nets;
pub mod planner;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod valveworld;

pub use error::{KrcError, Result};
pub use tensor::Tensor;
