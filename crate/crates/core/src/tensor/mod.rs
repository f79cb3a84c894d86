//! Dense tensors, numeric kernels, parameters and reverse-mode autodiff.

mod dense;
mod graph;
pub mod kernels;
mod param;
mod scalar;

pub use dense::Tensor;
pub use graph::{BatchNormParams, Graph, Mode, NodeId, OpKind, BCE_CLAMP};
pub use kernels::{conv2d, crop, matmul, resize_bilinear, softmax, transpose_hw, BN_EPS, BN_MOMENTUM};
pub use param::{param_rng, uniform_init, Param, ParamId, ParamKind, ParamStore};
pub use scalar::{DType, Scalar};

