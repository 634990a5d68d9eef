//! Depth-aware video action recognition: a frozen patch transformer with
//! trainable side networks for RGB and depth, a selective state-space depth
//! encoder, gated cross-attention fusion, and the training stack around
//! them, all on top of a small reverse-mode autodiff tensor library.

pub mod encoders;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synthvid;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Trainer32 = training::Trainer<f32>;
