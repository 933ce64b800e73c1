//! Gradient projection onto the principal column space of pre-trained
//! weights, with one compact trainable matrix and one set of Adam moments
//! shared by every layer of a functional group.
//!
//! The crate also carries the toy-scale machinery needed to exercise the
//! method: a small differentiable network, LoRA and full fine-tuning
//! baselines, a binary adapter checkpoint, and numerical checks of the
//! approximation bounds that motivate the method.

pub mod error;
pub mod linalg;
pub mod rng;

pub mod ablation;
pub mod adapter_io;
pub mod baselines;
pub mod net;
pub mod optim;
pub mod task;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
