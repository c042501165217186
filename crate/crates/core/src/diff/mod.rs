//! Dense tensors with reverse-mode differentiation, parameter storage,
//! the Adam optimizer and the checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod sample;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use conv::conv2d_3x3;
pub use ops::Activation;
pub use params::{Init, ParameterStore, Scope};
pub use sample::{grid_sample_bilinear, upsample2x_bilinear};
pub use scalar::{DType, Scalar};
pub use tensor::{no_grad, Tensor};
