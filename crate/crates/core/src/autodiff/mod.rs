//! Tape-based reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod conv;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use conv::{asymmetric_conv, wavelet_conv};
pub use gradcheck::{grad_check, grad_check_params, GRADCHECK_STEP};
pub use graph::sigmoid;
pub use graph::{ConvSpec, Gradients, Graph, Var, COSINE_EPS, LAYERNORM_EPS};
