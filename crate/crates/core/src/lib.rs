//! Scene synthesis from object parts.
//!
//! This crate trains generative adversarial models that build an image from
//! K latent components decoded by one weight-tied object generator, an
//! optional relational stage that lets component latents exchange
//! information through dot-product attention before decoding, an optional
//! background generator, and a fixed-order alpha composition of the decoded
//! layers. Around the model sit the pieces a study of such models needs:
//!
//! * multi-digit scene datasets with instance labels ([`datasets`]),
//! * adversarial training with optional gradient penalty and spectral
//!   normalization ([`training`], [`models`]),
//! * Fréchet-distance evaluation and latent traversals ([`evaluation`]),
//! * segmentation by inversion scored with the adjusted Rand index
//!   ([`segmentation`]),
//! * experiment configs, hyperparameter grids, and run orchestration
//!   ([`orchestration`]).
//!
//! Numeric code is generic over the [`scalar::Scalar`] precision; concrete
//! aliases for the common instantiations are exported at the crate root.

pub mod composition;
pub mod conv;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod nn;
pub mod opt;
pub mod orchestration;
pub mod params;
pub mod relational;
pub mod rng;
pub mod scalar;
pub mod segmentation;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;

/// Training-precision graph.
pub type Graph32 = Graph<f32>;
/// Verification-precision graph.
pub type Graph64 = Graph<f64>;
/// Training-precision parameter store.
pub type ParamStore32 = params::ParamStore<f32>;
/// Verification-precision parameter store.
pub type ParamStore64 = params::ParamStore<f64>;
