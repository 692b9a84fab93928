//! Audio tagging with patch graphs and learnable label graphs.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix the precision for common uses.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod graph;
pub mod head;
pub mod metrics;
pub mod mlg;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Atgnn;
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Atgnn32 = Atgnn<f32>;
pub type Atgnn64 = Atgnn<f64>;
