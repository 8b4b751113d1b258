//! Concept unlearning for a toy conditional diffusion model, driven by a
//! hypernetwork field that emits low-rank adapters.

pub mod adam;
pub mod checkpoint;
pub mod cli;
pub mod concepts;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod hypernet;
pub mod lora;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
