//! A small deterministic tensor kernel with hand-written backward passes,
//! sized for a toy encoder-decoder transformer.
//!
//! Values are stored as a [`Scalar`] (`f32` for training, `f64` for
//! gradient checking); every reduction is carried out in `f64` in a fixed
//! order, so results are bit-reproducible.

mod adam;
mod gradcheck;
mod kernels;
mod ops;
mod tensor;

pub use adam::{
    adam_step, clip_grad_norm, global_norm, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use gradcheck::{central_difference, grad_check, GradCheckReport, Probe};
pub use kernels::{gemm, gemm_nt, gemm_tn};
pub use ops::{
    attention, attention_backward, cross_entropy, cross_entropy_sum, linear_backward, matmul,
    merge_heads, relu, relu_backward, rmsnorm, rmsnorm_backward, softmax_lastdim, split_heads,
    AttentionCache, Mask, RmsCache, MASK_LOGIT, RMS_EPS,
};
pub use tensor::{Parameter, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("attention row {row} has every key masked")]
    AllMaskedRow { row: usize },
    #[error("target {target} at position {position} is outside vocabulary of {vocab}")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },
    #[error("every target position is padding")]
    AllPad,
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
