//! Deterministic single-precision neural-network math: NCHW tensors,
//! same-padded convolution, batch normalization, activations, MSE, Adam and
//! finite-difference gradient checks.

mod activation;
mod adam;
mod batchnorm;
mod conv;
pub mod gradcheck;
mod loss;
pub(crate) mod reference;
mod tensor;

pub use activation::{activation_backward, activation_forward, Activation};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, BatchNormParams, BnCache, Mode,
    DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvParams};
pub use gradcheck::{gradcheck, gradcheck_suite, GradcheckReport, Target};
pub use loss::mse_loss;
pub use tensor::{Dims, Param, Tensor4};
