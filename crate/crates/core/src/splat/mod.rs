//! Differentiable Gaussian splatting renderer and cameras.

pub mod camera;
pub mod image;
pub mod render;

pub use camera::{sample_camera, Camera, View};
pub use render::{project_gaussian, render, sh_to_color, Projection, RenderSettings, RenderedImage};
