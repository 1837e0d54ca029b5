//! Diffusion style transfer by value shuffling in self-attention, together
//! with the attention-injection and attention-distillation baselines.

pub mod container;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod image;
pub mod losses;
pub mod transfer;
pub mod verify;

pub use error::{Error, Result};
