//! Dynamic local-prior mixture-of-experts fine-tuning for frozen vision
//! transformers.
//!
//! A trainable convolutional branch extracts multi-scale local priors with a
//! gated mixture of heterogeneous convolutions. Bi-directional adapters
//! exchange information between that branch and a frozen transformer through
//! cosine-aligned deformable attention, and a channel-oriented scale
//! enhancement reorganizes the trainable stream after every block.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod extractor;
pub mod gradsuite;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
