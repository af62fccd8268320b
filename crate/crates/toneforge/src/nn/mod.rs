//! Minimal differentiable primitives: dilated causal convolution, gated
//! activation, dense affine layers, Adam, and finite-difference verification.
//! Everything is generic over [`crate::scalar::Scalar`] so the same code runs
//! at f32 for training/inference and f64 for gradient checking.

pub mod act;
pub mod adam;
pub mod affine;
pub mod conv;
pub mod gradcheck;
pub mod tensor;

pub use act::{
    gated_activation, gated_backward, gated_forward_cached, relu_backward, relu_inplace,
};
pub use adam::{Adam, AdamState};
pub use affine::Affine;
pub use conv::{conv_backward, dilated_causal_conv, left_context};
pub use gradcheck::{grad_check, GradCheckTarget, GRAD_CHECK_MAX_PARAMS};
pub use tensor::ParamTensor;
