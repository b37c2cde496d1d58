//! Robust proxy learning toolkit.
//!
//! Splits a convolutional classifier at its last convolution, distills the
//! tap features into robust and non-robust channels with an information
//! bottleneck, optimizes per-image and class-wise perturbations that
//! suppress non-robust channel gradients, turns the class-wise results into
//! robust proxies, and fine-tunes adversarially trained models with a proxy
//! pull/push loss. An attack suite and an analysis battery measure the
//! effects.

pub mod analysis;
pub mod attack;
pub mod autograd;
mod conv;
pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod model;
pub mod perturb;
pub mod proxy;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{grad, NoGradGuard, Var};
pub use error::{Error, Result};
pub use model::{Architecture, BaseLoss, SplitClassifier};
pub use tensor::Tensor;
