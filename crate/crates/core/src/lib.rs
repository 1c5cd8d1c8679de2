//! Toy-scale latent diffusion video super-resolution.
//!
//! A segment of low-quality frames is encoded to latents, denoised by a small
//! U-Net conditioned on the encoded input, on per-frame semantic tokens
//! (cross-attention) and on neighbouring frames (temporal attention plus a
//! channel-split spatio-temporal block), then decoded back to pixels.

pub mod ablate;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod seam;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod tsam;
pub mod video;

pub use error::{Error, Result};
pub use tensor::Tensor;
