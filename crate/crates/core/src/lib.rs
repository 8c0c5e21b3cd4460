pub mod captioner;
pub mod diffusion;
pub mod dual_control;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod synthset;
pub mod trainer;

pub use error::{Error, Result};
