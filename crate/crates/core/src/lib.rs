//! Desk-scale pixel-space diffusion engine for virtual try-on.
//!
//! The crate is organized as a stack: [`tensor`] provides dense arrays
//! with reverse-mode autodiff, [`nnet`] the tiny denoising UNet with
//! Adam and checkpointing, [`diffusion`] the noise schedule and DDIM
//! sampler, [`tryon`] the canvas assembly / mask prediction pipeline,
//! [`synthdata`] the procedural paired dataset, [`metrics`] the
//! evaluation suite, and [`cli`] the config-driven commands.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod nnet;
pub mod synthdata;
pub mod tryon;
pub mod tensor;

pub use error::{Error, Result};
