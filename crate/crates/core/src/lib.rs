//! Layered rendering diffusion: a sampler that splits generation into a
//! layered section, where each object layer denoises under its own caption and
//! a mask-shaped vision-guidance field, and a general section of ordinary
//! classifier-free guided sampling.

pub mod diffusion;
pub mod editing;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod io;
pub mod layered;
pub mod score;

pub use error::{Error, Result};
pub use grid::{Grid, Shape};
