//! Text-guided triplane generation.
//!
//! Each plane comes from its own image-like generator: a fixed positional
//! query is refined by ResConv + spatial-transformer pairs at low resolution,
//! grown by `U` upsampling stages and projected by a final convolution.

use crate::diff::params::mix_seed;
use crate::diff::{ops, Scalar, Scope, Tensor};
use crate::error::{Error, Result};
use crate::nn::{posenc_2d, Conv3x3, ResConvBlock, SpatialTransformerBlock, UpsampleBlock};

#[derive(Debug, Clone, PartialEq)]
pub struct TtgConfig {
    /// Feature channels per plane.
    pub channels: usize,
    /// Resolution of the positional query.
    pub base_res: usize,
    /// Number of 2× upsampling stages.
    pub upsamples: usize,
    /// ResConv + spatial transformer pairs at the base resolution.
    pub low_blocks: usize,
    pub num_heads: usize,
    pub ff_mult: usize,
    /// Half-width of the square each plane covers.
    pub extent: f64,
    /// Ablation: one generator emitting all three planes as channel groups.
    pub single_generator: bool,
}

impl Default for TtgConfig {
    fn default() -> Self {
        TtgConfig {
            channels: 16,
            base_res: 8,
            upsamples: 2,
            low_blocks: 3,
            num_heads: 4,
            ff_mult: 4,
            extent: 1.2,
            single_generator: false,
        }
    }
}

impl TtgConfig {
    pub fn resolution(&self) -> usize {
        self.base_res << self.upsamples
    }
}

pub struct UpStage<T: Scalar> {
    pub res: ResConvBlock<T>,
    pub st: SpatialTransformerBlock<T>,
    pub upsample: UpsampleBlock<T>,
}

pub struct PlaneGenerator<T: Scalar> {
    pub base_query: Tensor<T>,
    pub low: Vec<(ResConvBlock<T>, SpatialTransformerBlock<T>)>,
    pub up: Vec<UpStage<T>>,
    pub out_conv: Conv3x3<T>,
    pub channels: usize,
    pub out_channels: usize,
    pub base_res: usize,
}

impl<T: Scalar> PlaneGenerator<T> {
    pub fn new(
        scope: &mut Scope<'_, T>,
        cfg: &TtgConfig,
        context_dim: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let c = cfg.channels;
        let ff = cfg.ff_mult * c;
        let low = (0..cfg.low_blocks)
            .map(|i| {
                let mut s = scope.sub(&format!("low{i}"));
                Ok((
                    ResConvBlock::new(&mut s, "res", c)?,
                    SpatialTransformerBlock::new(&mut s, "st", c, context_dim, cfg.num_heads, ff)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let up = (0..cfg.upsamples)
            .map(|i| {
                let mut s = scope.sub(&format!("up{i}"));
                Ok(UpStage {
                    res: ResConvBlock::new(&mut s, "res", c)?,
                    st: SpatialTransformerBlock::new(&mut s, "st", c, context_dim, cfg.num_heads, ff)?,
                    upsample: UpsampleBlock::new(&mut s, "upsample", c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PlaneGenerator {
            base_query: posenc_2d(cfg.base_res, cfg.base_res, c)?,
            low,
            up,
            out_conv: Conv3x3::new(scope, "out_conv", c, out_channels)?,
            channels: c,
            out_channels,
            base_res: cfg.base_res,
        })
    }

    pub fn resolution(&self) -> usize {
        self.base_res << self.up.len()
    }

    /// Zeroes the last layer of every residual branch, reducing the generator
    /// to its text-independent trunk.
    pub fn zero_residual_outputs(&self) {
        for (res, st) in &self.low {
            res.zero_residual_output();
            st.zero_residual_outputs();
        }
        for stage in &self.up {
            stage.res.zero_residual_output();
            stage.st.zero_residual_outputs();
        }
    }

    fn same_layout(&self, other: &PlaneGenerator<T>) -> bool {
        self.channels == other.channels
            && self.out_channels == other.out_channels
            && self.base_res == other.base_res
            && self.low.len() == other.low.len()
            && self.up.len() == other.up.len()
    }
}

/// `[C,R,R]` plane features for text `y`.
pub fn generate_plane<T: Scalar>(gen: &PlaneGenerator<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let mut x = gen.base_query.clone();
    for (res, st) in &gen.low {
        x = res.forward(&x)?;
        x = st.forward(&x, y)?;
    }
    for stage in &gen.up {
        x = stage.res.forward(&x)?;
        x = stage.st.forward(&x, y)?;
        x = stage.upsample.forward(&x)?;
    }
    gen.out_conv.forward(&x)
}

/// The three axis-aligned feature planes, each `[C,R,R]`, covering
/// `[-extent, extent]²`.
#[derive(Clone)]
pub struct Triplane<T: Scalar> {
    pub xy: Tensor<T>,
    pub xz: Tensor<T>,
    pub yz: Tensor<T>,
    pub extent: f64,
}

impl<T: Scalar> Triplane<T> {
    pub fn channels(&self) -> usize {
        self.xy.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.xy.shape()[1]
    }

    pub fn planes(&self) -> [&Tensor<T>; 3] {
        [&self.xy, &self.xz, &self.yz]
    }
}

/// Three independent forward passes, one per plane.
pub fn generate_triplane<T: Scalar>(
    gx: &PlaneGenerator<T>,
    gy: &PlaneGenerator<T>,
    gz: &PlaneGenerator<T>,
    y: &Tensor<T>,
    extent: f64,
) -> Result<Triplane<T>> {
    if !gx.same_layout(gy) || !gx.same_layout(gz) {
        return Err(Error::Config("plane generators have different hyperparameters".into()));
    }
    Ok(Triplane {
        xy: generate_plane(gx, y)?,
        xz: generate_plane(gy, y)?,
        yz: generate_plane(gz, y)?,
        extent,
    })
}

/// One generator whose `3C` output channels are split into the three planes.
pub fn single_generator_mode<T: Scalar>(g: &PlaneGenerator<T>, y: &Tensor<T>, extent: f64) -> Result<Triplane<T>> {
    if g.out_channels % 3 != 0 {
        return Err(Error::InvalidArgument(format!(
            "single generator output {} is not divisible by 3",
            g.out_channels
        )));
    }
    let c = g.out_channels / 3;
    let all = generate_plane(g, y)?;
    Ok(Triplane {
        xy: ops::narrow_first(&all, 0, c)?,
        xz: ops::narrow_first(&all, c, c)?,
        yz: ops::narrow_first(&all, 2 * c, c)?,
        extent,
    })
}

pub enum TriplaneGenerator<T: Scalar> {
    Separate {
        xy: PlaneGenerator<T>,
        xz: PlaneGenerator<T>,
        yz: PlaneGenerator<T>,
    },
    Single(PlaneGenerator<T>),
}

pub const PLANE_NAMES: [&str; 3] = ["xy", "xz", "yz"];

impl<T: Scalar> TriplaneGenerator<T> {
    /// Registers parameters under `ttg.xy`, `ttg.xz`, `ttg.yz` (or `ttg.single`).
    /// Plane `i` is seeded with `plane_seeds[i]`.
    pub fn new(scope: &mut Scope<'_, T>, cfg: &TtgConfig, context_dim: usize, plane_seeds: [u64; 3]) -> Result<Self> {
        if cfg.channels % 4 != 0 {
            return Err(Error::Config(format!("triplane channels {} not divisible by 4", cfg.channels)));
        }
        let mut s = scope.sub("ttg");
        if cfg.single_generator {
            let mut g = s.seeded("single", plane_seeds[0]);
            return Ok(TriplaneGenerator::Single(PlaneGenerator::new(&mut g, cfg, context_dim, 3 * cfg.channels)?));
        }
        let mut build = |i: usize| PlaneGenerator::new(&mut s.seeded(PLANE_NAMES[i], plane_seeds[i]), cfg, context_dim, cfg.channels);
        Ok(TriplaneGenerator::Separate {
            xy: build(0)?,
            xz: build(1)?,
            yz: build(2)?,
        })
    }

    /// Seeds used when all planes derive from one master seed.
    pub fn default_seeds(master: u64) -> [u64; 3] {
        [mix_seed(master, 101), mix_seed(master, 102), mix_seed(master, 103)]
    }

    pub fn generate(&self, y: &Tensor<T>, extent: f64) -> Result<Triplane<T>> {
        match self {
            TriplaneGenerator::Separate { xy, xz, yz } => generate_triplane(xy, xz, yz, y, extent),
            TriplaneGenerator::Single(g) => single_generator_mode(g, y, extent),
        }
    }

    pub fn generators(&self) -> Vec<&PlaneGenerator<T>> {
        match self {
            TriplaneGenerator::Separate { xy, xz, yz } => vec![xy, xz, yz],
            TriplaneGenerator::Single(g) => vec![g],
        }
    }
}
