//! Correlated-property variational autoencoder.
//!
//! The crate learns a disentangled latent code `w` for a set of correlated
//! object properties plus a residual code `z`, relates `w` to the
//! properties through a learnable binary mask and per-property aggregation
//! networks, and maps the aggregated code `w′` to properties through an
//! invertible residual head. Generation runs the head backwards and then
//! searches `w` under value, range and max/min requirements.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases at
//! the crate root fix it to `f64`, which is what training, checkpoints and
//! the CLI use.

pub mod config;
pub mod datagen;
pub mod distributions;
mod error;
pub mod eval;
pub mod invhead;
pub mod maskpool;
pub mod model;
pub mod moo;
pub mod nn;
pub mod numcore;
pub mod pipeline;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numcore::Tensor<f64>;
pub type Tape = numcore::Tape<f64>;
pub type MaskMatrix = maskpool::MaskMatrix<f64>;
pub type Aggregator = maskpool::Aggregator<f64>;
pub type InvertibleHead = invhead::InvertibleHead<f64>;
pub type CorrVae = model::CorrVae<f64>;

pub use config::RunConfig;
pub use datagen::Dataset;
pub use moo::{ConstraintSpec, GenerationReport, Requirement};
