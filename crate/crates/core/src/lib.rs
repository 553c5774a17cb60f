//! Mask diffusion for camouflaged object segmentation.

pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data_io;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod iam;
pub mod metrics;
mod layers;
pub mod model;
pub mod objectives;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
