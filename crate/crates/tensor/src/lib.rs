//! Dense NCHW tensors with tape-based reverse-mode differentiation, sized
//! for small convolutional networks on a CPU.
//!
//! A [`Tape`] is scoped to one step: build leaves, run ops through [`Var`]
//! handles, call [`Tape::backward`] once, then drop or [`Tape::reset`] it.
//! Tapes run with subnormals flushed to zero.

mod error;
mod fpu;
mod gradcheck;
mod kernels;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use fpu::flush_subnormals;
pub use gradcheck::{finite_diff_check, relative_error, CheckOptions, CheckReport, InputCheck};
pub use ops::{
    conv2d, conv_transpose2d, dense, global_avg_pool, half_sse, kl_diag_gaussian, max_pool2d, softmax_cross_entropy,
};
pub use scalar::{DType, Scalar};
pub use tape::{CustomBackward, GradientMap, NodeId, Tape, Var};
pub use tensor::Tensor;
