//! Dual-branch longitudinal PET/CT lesion segmentation at desk scale.
//!
//! - [`tape`]: reverse-mode automatic differentiation over [`Tensor`]s
//! - [`windows`]: window partitioning, shifts and relative positions
//! - [`layers`]: conv blocks, windowed self- and cross-attention, gates
//! - [`model`]: the two-branch encoder-decoder and its parameter registry
//! - [`loss`], [`optim`], [`train`]: joint loss, AdamW and the toy trainer
//! - [`infer`]: Gaussian-blended sliding-window inference
//! - [`checkpoint`]: binary parameter files
//! - [`gradcheck`]: finite-difference verification of gradients

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod windows;

pub use error::{NeuralError, Result};
pub use model::{lasnet_forward, LasNetConfig, LasNetParams};
pub use params::{ParamTag, Registry};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
