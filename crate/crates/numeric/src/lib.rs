//! Dense `f64` tensors with tape-based reverse-mode differentiation and the
//! layer primitives used by the tree model: dilated convolution, batch and
//! layer normalization, pooling, signed-sqrt/L2 normalization and channel
//! attention plumbing.

pub mod conv;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod init;
pub mod nn;
pub mod norm;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use conv::ConvSpec;
pub use error::{Result, TensorError};
pub use nn::{BatchNorm2d, BnId, Conv2d, LayerNorm, Linear, Param, ParamId, ParamKind, ParamStore};
pub use norm::{BnState, Mode};
pub use tape::{Tape, Var};
pub use tensor::{argmax, Tensor};
