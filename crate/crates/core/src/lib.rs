//! Depth completion for transparent objects: geometric preprocessing,
//! latent diffusion conditioned on RGB and refined depth, and the
//! training/evaluation harness around them.

pub mod autograd;
pub mod cli;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod scheduler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
