use super::layers::{Conv3x3, Norm};
use crate::diff::{ops, upsample2x_bilinear, Scalar, Scope, Tensor};
use crate::error::Result;

/// norm → SiLU → conv → norm → SiLU → conv, plus the input.
pub struct ResConvBlock<T: Scalar> {
    pub norm1: Norm<T>,
    pub conv1: Conv3x3<T>,
    pub norm2: Norm<T>,
    pub conv2: Conv3x3<T>,
}

impl<T: Scalar> ResConvBlock<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(ResConvBlock {
            norm1: Norm::new(&mut s, "norm1", channels)?,
            conv1: Conv3x3::new(&mut s, "conv1", channels, channels)?,
            norm2: Norm::new(&mut s, "norm2", channels)?,
            conv2: Conv3x3::new(&mut s, "conv2", channels, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = ops::silu(&self.norm1.forward_channels(x)?);
        let h = self.conv1.forward(&h)?;
        let h = ops::silu(&self.norm2.forward_channels(&h)?);
        let h = self.conv2.forward(&h)?;
        ops::add(x, &h)
    }

    pub fn zero_residual_output(&self) {
        self.conv2.zero();
    }
}

/// Bilinear 2× enlargement followed by a 3×3 convolution.
pub struct UpsampleBlock<T: Scalar> {
    pub conv: Conv3x3<T>,
}

impl<T: Scalar> UpsampleBlock<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(UpsampleBlock {
            conv: Conv3x3::new(&mut s, "conv", channels, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&upsample2x_bilinear(x)?)
    }
}
