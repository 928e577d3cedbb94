//! Density-map object counting.
//!
//! The crate builds and trains a counting network made of a truncated VGG16
//! front-end with channel/spatial attention, a dilated-convolution scale
//! pyramid, and a deformable-convolution back-end. Every layer has a
//! hand-written forward and backward kernel, driven by the reverse-mode
//! engine in [`graph`]. Around the network sit Gaussian ground-truth
//! generation, augmentation, synthetic scenes, SGD training and MAE/RMSE
//! evaluation.
//!
//! Everything is generic over the [`Scalar`] element type; the aliases at
//! the crate root fix it to `f64`, which is what the pipeline uses.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod groundtruth;
pub mod network;
pub mod ops;
mod params;
pub mod rng;
mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use evaluation::Metrics;
pub use groundtruth::{DensityMap, GaussianSpec};
pub use graph::{Gradients, Graph, Var};
pub use network::{build_aspdnet, predict_count, Model, ModelConfig, Variant};
pub use ops::{AttentionSpec, ConvSpec};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{Init, Tensor};
pub use training::{TrainConfig, TrainLog};

pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model64 = Model<f64>;
