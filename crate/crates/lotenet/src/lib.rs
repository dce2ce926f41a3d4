//! Locally orderless tensor network (LoTeNet) image classification.
//!
//! A supervised-learning engine that classifies 2D and 3D images with
//! hierarchical layers of matrix-product-state (MPS) blocks interleaved with
//! squeeze reshaping, trained end to end by reverse-mode automatic
//! differentiation.
//!
//! The crate is generic over the scalar type via [`scalar::Real`]
//! (`f64` default, `f32` opt-in); concrete aliases live at the crate root.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod feature_map;
pub mod metrics;
pub mod model;
pub mod mps;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Real;
pub use tensor::{BinOp, MapOp, Tensor, TensorError};

/// Default-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor (opt-in training mode).
pub type Tensor32 = Tensor<f32>;

/// Default-precision model.
pub type LoTeNet64 = model::LoTeNetModel<f64>;
/// Single-precision model.
pub type LoTeNet32 = model::LoTeNetModel<f32>;
/// Default-precision dataset.
pub type Dataset64 = data::Dataset<f64>;
/// Single-precision dataset.
pub type Dataset32 = data::Dataset<f32>;
