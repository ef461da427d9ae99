//! Experts Composition: small specialist classifiers with an "other"
//! output, composed without further training over the quadrants of 2×2
//! composite images, plus the continual-learning baselines and few-shot
//! variant they are measured against.
//!
//! The network engine is generic over the scalar type; the aliases below
//! fix it to `f32` (training) or `f64` (gradient verification).

pub mod composition;
pub mod continual;
pub mod datagen;
pub mod error;
pub mod experts;
pub mod fewshot;
pub mod harness;
pub mod nn;
pub mod scalar;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type Adam32 = nn::Adam<f32>;
pub type Adam64 = nn::Adam<f64>;
