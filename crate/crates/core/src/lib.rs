//! Flow matching over vector-quantized latents.
//!
//! The engine transports standard normal noise into a frozen codebook's
//! embedding space along straight lines. Three training methods share that
//! geometry:
//!
//! * **Purrception**: a categorical posterior over code indices, trained with
//!   cross-entropy (plus z-loss), whose barycentric velocity
//!   `(mu - z) / (1 - t)` drives the ODE.
//! * **CFM**: direct regression of the conditional velocity.
//! * **DFM**: mask-source discrete flow matching over code tokens.
//!
//! Everything is verified against a closed-form Bayes posterior on synthetic
//! code-grid data whose joint distribution can be enumerated exactly.
//!
//! Core math is generic over [`Scalar`] (`f32` for training, `f64` for
//! oracles and gradient checks); the aliases below fix the common choices.

pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod path;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod training;

pub use codebook::{CodeGrid, Codebook, LatentPoint};
pub use config::RunConfig;
pub use data::DataSpec;
pub use error::{Error, Result};
pub use model::{Head, Model, ModelConfig, Params, PosteriorLogits};
pub use objectives::{LossReport, MaskedGrid};
pub use path::{OraclePosterior, TimePoint, EPS_T};
pub use scalar::Scalar;
pub use training::{Checkpoint, Method, OptimConfig};

/// Single-precision codebook, used by trained models.
pub type Codebook32 = Codebook<f32>;
/// Double-precision codebook, used by the Bayes oracle.
pub type Codebook64 = Codebook<f64>;
/// Training-precision model.
pub type Model32 = Model<f32>;
/// Gradient-check precision model.
pub type Model64 = Model<f64>;
pub type Params32 = Params<f32>;
pub type Params64 = Params<f64>;
