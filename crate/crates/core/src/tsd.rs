//! Text-guided shape deformation: a fixed anchor lattice is displaced by a
//! bounded, text-conditioned offset to give the Gaussian centers.

use crate::diff::{ops, Scalar, Scope, Tensor};
use crate::error::{Error, Result};
use crate::nn::posenc::{point_encoding_width, posenc_points};
use crate::nn::{CrossAttentionBlock, FeedForward, Linear};

/// Regular `n³` lattice over `[-extent, extent]³`, x varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    points: Vec<[f64; 3]>,
    n_side: usize,
    extent: f64,
}

impl AnchorGrid {
    pub fn new(n_side: usize, extent: f64) -> Result<Self> {
        if n_side < 2 {
            return Err(Error::InvalidArgument(format!("anchor grid needs n_side >= 2, got {n_side}")));
        }
        if !(extent > 0.0) {
            return Err(Error::InvalidArgument(format!("anchor extent must be positive, got {extent}")));
        }
        let step = 2.0 * extent / (n_side - 1) as f64;
        let coord = |i: usize| -extent + i as f64 * step;
        let mut points = Vec::with_capacity(n_side.pow(3));
        for k in 0..n_side {
            for j in 0..n_side {
                for i in 0..n_side {
                    points.push([coord(i), coord(j), coord(k)]);
                }
            }
        }
        Ok(AnchorGrid { points, n_side, extent })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn n_side(&self) -> usize {
        self.n_side
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / (self.n_side - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.points.iter().flat_map(|p| p.iter().map(|v| T::lit(*v))).collect();
        Tensor::new(data, &[self.points.len(), 3]).expect("lattice shape")
    }
}

pub fn make_anchor_grid(n_side: usize, extent: f64) -> Result<AnchorGrid> {
    AnchorGrid::new(n_side, extent)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsdConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ff_hidden: usize,
    /// Octaves of the sinusoidal anchor encoding.
    pub point_freqs: usize,
    /// Maximum displacement per axis.
    pub beta: f64,
}

impl Default for TsdConfig {
    fn default() -> Self {
        TsdConfig {
            d_model: 32,
            num_heads: 4,
            num_blocks: 2,
            ff_hidden: 128,
            point_freqs: 4,
            beta: 0.2,
        }
    }
}

pub struct TsdBlock<T: Scalar> {
    pub attn: CrossAttentionBlock<T>,
    pub ff: FeedForward<T>,
}

pub struct TsdNetwork<T: Scalar> {
    pub point_embed: Linear<T>,
    pub blocks: Vec<TsdBlock<T>>,
    pub head: Linear<T>,
    pub beta: f64,
    pub point_freqs: usize,
}

/// Output of [`deform`]: the offsets and the displaced centers, both `[M,3]`.
pub struct Deformation<T: Scalar> {
    pub offsets: Tensor<T>,
    pub centers: Tensor<T>,
}

impl<T: Scalar> TsdNetwork<T> {
    pub fn new(scope: &mut Scope<'_, T>, cfg: &TsdConfig, context_dim: usize) -> Result<Self> {
        if !(cfg.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", cfg.beta)));
        }
        let mut s = scope.sub("tsd");
        let point_embed = Linear::new(&mut s, "point_embed", point_encoding_width(cfg.point_freqs), cfg.d_model, true)?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let mut b = s.sub(&format!("block{i}"));
                Ok(TsdBlock {
                    attn: CrossAttentionBlock::new(&mut b, "attn", cfg.d_model, context_dim, cfg.num_heads)?,
                    ff: FeedForward::new(&mut b, "ff", cfg.d_model, cfg.ff_hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut s, "head", cfg.d_model, 3, true)?;
        Ok(TsdNetwork {
            point_embed,
            blocks,
            head,
            beta: cfg.beta,
            point_freqs: cfg.point_freqs,
        })
    }
}

/// `Δ = 2β·sigmoid(head(blocks(embed(p), y))) − β`, centers `p + Δ`.
pub fn deform<T: Scalar>(net: &TsdNetwork<T>, grid: &AnchorGrid, y: &Tensor<T>) -> Result<Deformation<T>> {
    let enc = posenc_points::<T>(grid.points(), net.point_freqs)?;
    let mut x = net.point_embed.forward(&enc)?;
    for b in &net.blocks {
        x = b.attn.forward(&x, y)?;
        x = b.ff.forward(&x)?;
    }
    let raw = net.head.forward(&x)?;
    let offsets = ops::add_scalar(&ops::scale(&ops::sigmoid_open(&raw), 2.0 * net.beta), -net.beta);
    let centers = ops::add(&grid.to_tensor(), &offsets)?;
    Ok(Deformation { offsets, centers })
}
