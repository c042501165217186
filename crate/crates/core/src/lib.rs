//! Text-conditioned 3D Gaussian splat generation on the CPU.
//!
//! A text embedding deforms a fixed anchor lattice into Gaussian centers,
//! three independent text-conditioned generators produce a triplane, and a
//! pair of small MLPs decode per-center triplane features into the remaining
//! Gaussian attributes. A differentiable splatting renderer closes the loop
//! for score-distillation style training against a pluggable guidance model.

pub mod diff;
pub mod error;
pub mod nn;
pub mod textenc;
pub mod tsd;
pub mod ttg;
pub mod decoder;
pub mod splat;
pub mod model;
pub mod train;
pub mod pipeline;

pub use error::{Error, Result};
