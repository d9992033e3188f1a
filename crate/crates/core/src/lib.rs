//! Segmentation from natural language expressions.
//!
//! An LSTM encodes the expression into a unit vector, a small fully
//! convolutional network turns the image into a grid of normalized local
//! descriptors with appended relative coordinates, the two are fused by tiling
//! and concatenation, a pair of 1x1 convolutions scores every grid cell, and a
//! bilinear-initialized transposed convolution upsamples the scores to pixels.

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod pnm;
pub mod tensor;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Sample, Split};
pub use mask::Mask;
pub use model::{ModelConfig, SegModel};
pub use params::{ParamStore, SgdMomentum};
pub use tensor::{Tape, Tensor, Var};
