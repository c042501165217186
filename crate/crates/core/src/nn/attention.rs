//! Text cross-attention, the feed-forward sub-block, and the spatial
//! transformer that applies both to a flattened feature map.

use super::layers::{Linear, Norm};
use crate::diff::{ops, Activation, Scalar, Scope, Tensor};
use crate::error::{Error, Result};

/// Pre-norm multi-head attention from a set of query rows onto the rows of a
/// text embedding, with a residual connection around the attended value.
pub struct CrossAttentionBlock<T: Scalar> {
    pub num_heads: usize,
    pub d_model: usize,
    pub context_dim: usize,
    pub norm: Norm<T>,
    pub to_q: Linear<T>,
    pub to_k: Linear<T>,
    pub to_v: Linear<T>,
    pub to_out: Linear<T>,
}

impl<T: Scalar> CrossAttentionBlock<T> {
    pub fn new(
        scope: &mut Scope<'_, T>,
        name: &str,
        d_model: usize,
        context_dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || d_model % num_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} is not divisible by {num_heads} heads"
            )));
        }
        let mut s = scope.sub(name);
        Ok(CrossAttentionBlock {
            num_heads,
            d_model,
            context_dim,
            norm: Norm::new(&mut s, "norm", d_model)?,
            to_q: Linear::new(&mut s, "to_q", d_model, d_model, false)?,
            to_k: Linear::new(&mut s, "to_k", context_dim, d_model, false)?,
            to_v: Linear::new(&mut s, "to_v", context_dim, d_model, false)?,
            to_out: Linear::new(&mut s, "to_out", d_model, d_model, true)?,
        })
    }

    pub fn forward(&self, queries: &Tensor<T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_scores(queries, context)?.0)
    }

    /// Also returns each head's `[N, L]` score matrix.
    pub fn forward_with_scores(
        &self,
        queries: &Tensor<T>,
        context: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if queries.rank() != 2 || queries.shape()[1] != self.d_model {
            return Err(Error::Dimension(format!(
                "attention queries {:?} do not match d_model {}",
                queries.shape(),
                self.d_model
            )));
        }
        if context.rank() != 2 || context.shape()[1] != self.context_dim || context.shape()[0] == 0 {
            return Err(Error::Dimension(format!(
                "attention context {:?} does not match width {}",
                context.shape(),
                self.context_dim
            )));
        }
        let h = self.norm.forward(queries)?;
        let q = self.to_q.forward(&h)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        let dh = self.d_model / self.num_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut scores = Vec::with_capacity(self.num_heads);
        for head in 0..self.num_heads {
            let qh = ops::narrow_cols(&q, head * dh, dh)?;
            let kh = ops::narrow_cols(&k, head * dh, dh)?;
            let vh = ops::narrow_cols(&v, head * dh, dh)?;
            let logits = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, inv_sqrt);
            let score = ops::softmax_lastdim(&logits)?;
            heads.push(ops::matmul(&score, &vh)?);
            scores.push(score);
        }
        let attended = if heads.len() == 1 {
            heads.pop().unwrap()
        } else {
            ops::concat_cols(&heads)?
        };
        let out = ops::add(queries, &self.to_out.forward(&attended)?)?;
        Ok((out, scores))
    }

    pub fn zero_residual_output(&self) {
        self.to_out.zero();
    }
}

/// Pre-norm two-layer MLP with a residual connection.
pub struct FeedForward<T: Scalar> {
    pub norm: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub activation: Activation,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, d_model: usize, hidden: usize) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(FeedForward {
            norm: Norm::new(&mut s, "norm", d_model)?,
            fc1: Linear::new(&mut s, "fc1", d_model, hidden, true)?,
            fc2: Linear::new(&mut s, "fc2", hidden, d_model, true)?,
            activation: Activation::Silu,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(&self.norm.forward(x)?)?;
        let h = self.fc2.forward(&ops::activation(&h, self.activation))?;
        ops::add(x, &h)
    }

    pub fn zero_residual_output(&self) {
        self.fc2.zero();
    }
}

/// Two text cross-attention stages and a feed-forward stage over the pixels
/// of a `[C,H,W]` feature map. There is no pixel self-attention.
pub struct SpatialTransformerBlock<T: Scalar> {
    pub attn1: CrossAttentionBlock<T>,
    pub attn2: CrossAttentionBlock<T>,
    pub ff: FeedForward<T>,
}

impl<T: Scalar> SpatialTransformerBlock<T> {
    pub fn new(
        scope: &mut Scope<'_, T>,
        name: &str,
        channels: usize,
        context_dim: usize,
        num_heads: usize,
        ff_hidden: usize,
    ) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(SpatialTransformerBlock {
            attn1: CrossAttentionBlock::new(&mut s, "attn1", channels, context_dim, num_heads)?,
            attn2: CrossAttentionBlock::new(&mut s, "attn2", channels, context_dim, num_heads)?,
            ff: FeedForward::new(&mut s, "ff", channels, ff_hidden)?,
        })
    }

    pub fn forward(&self, fmap: &Tensor<T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = fmap.shape().to_vec();
        if shape.len() != 3 || shape[0] != self.attn1.d_model {
            return Err(Error::ChannelMismatch {
                op: "spatial_transformer",
                expected: self.attn1.d_model,
                actual: shape.first().copied().unwrap_or(0),
            });
        }
        let tokens = ops::transpose(&ops::reshape(fmap, &[shape[0], shape[1] * shape[2]])?)?;
        let x = self.attn1.forward(&tokens, context)?;
        let x = self.attn2.forward(&x, context)?;
        let x = self.ff.forward(&x)?;
        ops::reshape(&ops::transpose(&x)?, &shape)
    }

    pub fn zero_residual_outputs(&self) {
        self.attn1.zero_residual_output();
        self.attn2.zero_residual_output();
        self.ff.zero_residual_output();
    }
}
