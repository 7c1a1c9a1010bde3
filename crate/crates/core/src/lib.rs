//! Multiscale CNN-CRF segmentation.
//!
//! Pixel-level masks come from an encoder-decoder network built from
//! multiscale blocks, refined by a fully connected CRF. Patch-level masks come
//! from classifying non-overlapping tiles. The two are fused by gating the
//! patch mask with a dilation buffer around the CRF mask.

pub mod densecrf;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod netbuilder;
pub mod patchseg;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use raster::{BinaryMask, GrayImage, Plane, ProbabilityMap};
pub use scalar::Real;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Network64 = netbuilder::Network<f64>;
pub type Network32 = netbuilder::Network<f32>;
