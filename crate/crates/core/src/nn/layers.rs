use crate::diff::{ops, Init, Scalar, Scope, Tensor};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// `x · W + b` with `W` stored as `[in, out]`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut s = scope.sub(name);
        let weight = s.param("weight", &[d_in, d_out], Init::fan_in(d_in))?;
        let bias = if bias {
            Some(s.param("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => ops::add_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn zero(&self) {
        zero_tensor(&self.weight);
        if let Some(b) = &self.bias {
            zero_tensor(b);
        }
    }
}

pub(crate) fn zero_tensor<T: Scalar>(t: &Tensor<T>) {
    t.set_data(&vec![T::zero(); t.numel()]).expect("leaf parameter");
}

/// Layer-norm affine parameters over a feature axis of width `d`.
pub struct Norm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, d: usize) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(Norm {
            gamma: s.param("gamma", &[d], Init::Ones)?,
            beta: s.param("beta", &[d], Init::Zeros)?,
        })
    }

    /// Normalizes rows of `x[.., d]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }

    /// Normalizes the channel vector of every pixel of `x[C,H,W]`.
    pub fn forward_channels(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let flat = ops::reshape(x, &[shape[0], shape[1] * shape[2]])?;
        let rows = ops::transpose(&flat)?;
        let normed = self.forward(&rows)?;
        ops::reshape(&ops::transpose(&normed)?, &shape)
    }
}

/// Weight and bias of a 3×3 same-padding convolution.
pub struct Conv3x3<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(Conv3x3 {
            weight: s.param("weight", &[c_out, c_in, 3, 3], Init::fan_in(c_in * 9))?,
            bias: s.param("bias", &[c_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::diff::conv2d_3x3(x, &self.weight, &self.bias)
    }

    pub fn zero(&self) {
        zero_tensor(&self.weight);
        zero_tensor(&self.bias);
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}
