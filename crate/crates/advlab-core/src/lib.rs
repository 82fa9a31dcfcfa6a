//! Desk-scale adversarial robustness laboratory for a toy vision-language
//! stack: a reverse-mode autodiff engine, a synthetic shapes dataset, a
//! dual-encoder and an image-conditioned captioner, gradient attacks
//! (FGSM/PGD/APGD), adversarial training loops, and an evaluation harness.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
