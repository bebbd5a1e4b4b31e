//! A small reverse-mode engine over fixed layer lists.
//!
//! Networks are validated [`LayerSpec`] sequences operating on batched
//! tensors `[N, ...]`. [`Network::forward`] records a [`Tape`] that
//! [`Network::backward`] replays in reverse; convolutions are lowered to GEMM
//! through im2col.

mod adam;
mod conv;
mod gradcheck;
mod layers;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{
    check_parameter_gradients, gradient_check, gradient_check_with, GradCheckConfig,
    GradCheckReport,
};
pub use layers::{Gradients, LayerSpec, NamedTensor, Network, ParameterSet, Tape};
pub use tensor::{Real, Tensor};
