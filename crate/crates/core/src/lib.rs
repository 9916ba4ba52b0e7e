//! Two-stage novelty detection: an autoencoder learns in-distribution features, then a
//! discriminator head and a margin objective are trained jointly against nonlinearly
//! distorted copies of the training images.

pub mod atomic;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distortions;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod image;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod scoring;
pub mod training;

pub use error::{Result, TendError};
