//! Triplane feature lookup and the shape/color MLPs that turn a center's
//! feature into the remaining Gaussian attributes.

use crate::diff::{grid_sample_bilinear, ops, Scalar, Scope, Tensor};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::ttg::Triplane;

/// Quaternion used when the predicted one has (near) zero length.
pub const IDENTITY_QUATERNION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
pub const DEGENERATE_QUATERNION_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Log-extent bounds `(a, b)` of the scaling attribute.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Whether centers are appended to the MLP input (off for the ablation).
    pub use_coordinates: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 64,
            scale_min: -9.0,
            scale_max: -3.0,
            use_coordinates: true,
        }
    }
}

struct Mlp<T: Scalar> {
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    fn new(scope: &mut Scope<'_, T>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(Mlp {
            fc1: Linear::new(&mut s, "fc1", d_in, hidden, true)?,
            fc2: Linear::new(&mut s, "fc2", hidden, d_out, true)?,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&ops::silu(&self.fc1.forward(x)?))
    }

    fn zero(&self) {
        self.fc1.zero();
        self.fc2.zero();
    }
}

pub struct GaussianDecoder<T: Scalar> {
    f_shape: Mlp<T>,
    f_color: Mlp<T>,
    pub scale_bounds: (f64, f64),
    pub use_coordinates: bool,
    pub feature_dim: usize,
}

/// Differentiable per-Gaussian attributes, each with `M` rows.
#[derive(Clone)]
pub struct Gaussians<T: Scalar> {
    pub centers: Tensor<T>,
    pub scaling_raw: Tensor<T>,
    pub rotation: Tensor<T>,
    pub opacity_logit: Tensor<T>,
    pub opacity: Tensor<T>,
    pub sh_dc: Tensor<T>,
}

impl<T: Scalar> Gaussians<T> {
    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> GaussianDecoder<T> {
    pub fn new(scope: &mut Scope<'_, T>, cfg: &DecoderConfig, feature_dim: usize) -> Result<Self> {
        if !(cfg.scale_min < cfg.scale_max) {
            return Err(Error::Config(format!(
                "scale bounds ({}, {}) are not increasing",
                cfg.scale_min, cfg.scale_max
            )));
        }
        let d_in = feature_dim + if cfg.use_coordinates { 3 } else { 0 };
        let mut s = scope.sub("decoder");
        Ok(GaussianDecoder {
            f_shape: Mlp::new(&mut s, "f_shape", d_in, cfg.hidden, 8)?,
            f_color: Mlp::new(&mut s, "f_color", d_in, cfg.hidden, 3)?,
            scale_bounds: (cfg.scale_min, cfg.scale_max),
            use_coordinates: cfg.use_coordinates,
            feature_dim,
        })
    }

    pub fn zero(&self) {
        self.f_shape.zero();
        self.f_color.zero();
    }
}

/// Mean of bilinear lookups of the `(x,y)`, `(x,z)`, `(y,z)` projections of
/// each center. Returns `[M, C]`.
pub fn sample_triplane<T: Scalar>(tri: &Triplane<T>, centers: &Tensor<T>) -> Result<Tensor<T>> {
    if centers.rank() != 2 || centers.shape()[1] != 3 {
        return Err(Error::Dimension(format!("centers must be [M,3], got {:?}", centers.shape())));
    }
    let norm = ops::scale(centers, 1.0 / tri.extent);
    let x = ops::narrow_cols(&norm, 0, 1)?;
    let y = ops::narrow_cols(&norm, 1, 1)?;
    let z = ops::narrow_cols(&norm, 2, 1)?;
    let f_xy = grid_sample_bilinear(&tri.xy, &ops::concat_cols(&[x.clone(), y.clone()])?)?;
    let f_xz = grid_sample_bilinear(&tri.xz, &ops::concat_cols(&[x, z.clone()])?)?;
    let f_yz = grid_sample_bilinear(&tri.yz, &ops::concat_cols(&[y, z])?)?;
    Ok(ops::scale(&ops::add(&ops::add(&f_xy, &f_xz)?, &f_yz)?, 1.0 / 3.0))
}

/// Maps features (and centers) to opacity, bounded log-scaling, unit
/// quaternion rotation and degree-0 SH color.
pub fn decode<T: Scalar>(dec: &GaussianDecoder<T>, features: &Tensor<T>, centers: &Tensor<T>) -> Result<Gaussians<T>> {
    if features.rank() != 2 || features.shape()[1] != dec.feature_dim {
        return Err(Error::Dimension(format!(
            "features {:?} do not match decoder width {}",
            features.shape(),
            dec.feature_dim
        )));
    }
    let input = if dec.use_coordinates {
        ops::concat_cols(&[features.clone(), centers.clone()])?
    } else {
        features.clone()
    };
    let shape_out = dec.f_shape.forward(&input)?;
    let opacity_logit = ops::narrow_cols(&shape_out, 0, 1)?;
    let opacity = ops::sigmoid_open(&opacity_logit);
    let (a, b) = dec.scale_bounds;
    let scaling_raw = ops::add_scalar(&ops::scale(&ops::sigmoid_open(&ops::narrow_cols(&shape_out, 1, 3)?), b - a), a);
    let quat = ops::narrow_cols(&shape_out, 4, 4)?;
    let identity: Vec<T> = IDENTITY_QUATERNION.iter().map(|v| T::lit(*v)).collect();
    let rotation = ops::normalize_rows(&quat, DEGENERATE_QUATERNION_NORM, &identity)?;
    let sh_dc = dec.f_color.forward(&input)?;
    Ok(Gaussians {
        centers: centers.clone(),
        scaling_raw,
        rotation,
        opacity_logit,
        opacity,
        sh_dc,
    })
}

/// Detached, plain-data Gaussian attributes. Opacity is stored as its
/// pre-sigmoid logit so export and import are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub centers: Vec<[f32; 3]>,
    pub scaling_raw: Vec<[f32; 3]>,
    pub rotation: Vec<[f32; 4]>,
    pub opacity_logit: Vec<f32>,
    pub sh_dc: Vec<[f32; 3]>,
}

fn to_rows<const N: usize, T: Scalar>(t: &Tensor<T>) -> Vec<[f32; N]> {
    t.data().chunks(N).map(|c| std::array::from_fn(|i| c[i].as_f64() as f32)).collect()
}

fn from_rows<const N: usize, T: Scalar>(rows: &[[f32; N]]) -> Tensor<T> {
    let data = rows.iter().flatten().map(|v| T::lit(*v as f64)).collect();
    Tensor::new(data, &[rows.len(), N]).expect("row-major attribute table")
}

impl GaussianSet {
    pub fn from_gaussians<T: Scalar>(g: &Gaussians<T>) -> Self {
        GaussianSet {
            centers: to_rows(&g.centers),
            scaling_raw: to_rows(&g.scaling_raw),
            rotation: to_rows(&g.rotation),
            opacity_logit: to_rows::<1, T>(&g.opacity_logit).into_iter().map(|r| r[0]).collect(),
            sh_dc: to_rows(&g.sh_dc),
        }
    }

    /// Constant tensors for rendering.
    pub fn to_gaussians<T: Scalar>(&self) -> Gaussians<T> {
        let logits: Vec<[f32; 1]> = self.opacity_logit.iter().map(|v| [*v]).collect();
        let opacity_logit = from_rows::<1, T>(&logits);
        Gaussians {
            centers: from_rows(&self.centers),
            scaling_raw: from_rows(&self.scaling_raw),
            rotation: from_rows(&self.rotation),
            opacity: ops::sigmoid_open(&opacity_logit),
            opacity_logit,
            sh_dc: from_rows(&self.sh_dc),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn opacity(&self) -> Vec<f32> {
        self.opacity_logit.iter().map(|v| ops::sigmoid_open_scalar(*v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.centers.len();
        if self.scaling_raw.len() != m || self.rotation.len() != m || self.opacity_logit.len() != m || self.sh_dc.len() != m {
            return Err(Error::Dimension("Gaussian attribute arrays differ in length".into()));
        }
        Ok(())
    }
}
