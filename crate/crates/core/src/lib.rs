//! Graph-coupled score-based diffusion for probabilistic spatiotemporal
//! forecasting.
//!
//! The crate is `no_std` (with `alloc`): tensors, reverse-mode autodiff, the
//! forward SDE family, the score network, training, reverse-time sampling,
//! probabilistic metrics and dataset windowing. File formats and the command
//! line live in the companion `progen` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod sde;
pub mod tensor;
pub mod train;

pub use autodiff::{gradient_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use graph::{ChebBasis, Edge, Graph};
pub use model::{ModelConfig, PositionMarkers, ScoreInput, ScoreModel, ScoreModelParams};
pub use sde::{BetaSchedule, SdeKind, SdeSpec};
pub use tensor::Tensor;
