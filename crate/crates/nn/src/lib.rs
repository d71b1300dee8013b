//! Minimal CPU engine for convolutional segmentation networks.
//!
//! Tensors are dense NCHW `f32`. Every [`Layer`] caches what it needs during a
//! training forward pass and hands back input gradients from `backward`;
//! composite models chain them explicitly.

mod activation;
mod conv;
mod error;
mod gemm;
mod init;
mod layer;
mod norm;
mod optim;
mod param;
mod pool;
mod resnet;
mod tensor;

pub use activation::Relu;
pub use conv::{conv_output_len, conv_transpose_output_len, Conv2d, ConvTranspose2d};
pub use error::{NnError, Result};
pub use init::{init_uniform_fan_in, uniform_bound, BIAS_STD};
pub use layer::{Layer, Mode};
pub use norm::BatchNorm2d;
pub use optim::Adam;
pub use param::{Buffer, Param, ParamRole};
pub use pool::MaxPool2d;
pub use resnet::{BasicBlock, ResNet, IMAGENET_MEAN, IMAGENET_STD, RESNET34_BLOCKS};
pub use tensor::Tensor;
