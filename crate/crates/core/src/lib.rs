//! Few-step generators trained purely by regularized reward maximization.
//!
//! A pretrained x0-prediction denoiser initializes a `K`-step generator, which is then
//! fine-tuned to maximize a set of differentiable rewards. Each reward gradient is
//! normalized to a fixed length before the rewards are combined, classifier-free
//! guidance and a two-model density ratio enter as implicit rewards, and a squared
//! weight distance to the pretrained parameters keeps samples near the data manifold.
//! Everything runs on low-dimensional synthetic Gaussian mixtures, where the exact
//! scores, densities and reward optima are available as ground truth.

pub mod cli;
pub mod data;
pub mod error;
pub mod generator;
pub mod optim;
pub mod oracle;
pub mod rewards;
pub mod rng;
pub mod schedule;
pub mod scorenet;
pub mod trainer;

pub use error::{Error, Result};
