//! Core library for ICAM-style interpretable phenotype modelling on 2D images.
//!
//! The crate provides the full pipeline: synthetic phantom generation,
//! a reverse-mode autodiff engine, the VAE-GAN model and its losses, training,
//! translation-based attribution, baseline attribution methods, and the
//! evaluation protocol.

pub mod attribution;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod embed;
pub mod error;
pub mod evalmetrics;
pub mod export;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod synthdata;
pub mod tensorfile;
pub mod trainer;

pub use error::{Error, Result};
