//! In-place activated batch normalization.
//!
//! Kernels for a fused BatchNorm + invertible activation layer that keeps
//! only its output for the backward pass, recovering the normalized input by
//! inverting the activation and the affine transform. Alongside it sit the
//! conventional and checkpointing variants of the same BN+Act+Conv block, a
//! ledger of the buffers each one retains, and a finite-difference oracle
//! for checking every analytic gradient.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

#![allow(clippy::needless_range_loop)]

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod scalar;
pub mod strategies;
pub mod tensor;

pub use activation::ActivationFn;
pub use batchnorm::{BnGradients, ChannelParams, MinibatchStats, RunningStats};
pub use conv::{ConvGrads, ConvParams};
pub use error::{Error, Result};
pub use gradcheck::CheckReport;
pub use scalar::{DType, Scalar};
pub use strategies::{
    BlockParams, BlockPlan, BufferLedger, LayerParams, LayerSpec, Strategy, Trace,
};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ChannelParams32 = ChannelParams<f32>;
pub type ChannelParams64 = ChannelParams<f64>;
pub type BlockParams32 = BlockParams<f32>;
pub type BlockParams64 = BlockParams<f64>;
