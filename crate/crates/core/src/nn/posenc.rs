use crate::diff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Fixed 2D sinusoidal encoding `[C,H,W]`. Channel groups, each `C/4` wide:
/// `sin(y·f)`, `cos(y·f)`, `sin(x·f)`, `cos(x·f)` with `f_k = 10000^(-k/(C/4))`
/// and `y`, `x` the integer row and column.
pub fn posenc_2d<T: Scalar>(h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::InvalidArgument(format!("posenc_2d channels {c} not divisible by 4")));
    }
    let bands = c / 4;
    let freqs: Vec<f64> = (0..bands)
        .map(|k| 10000f64.powf(-(k as f64) / bands as f64))
        .collect();
    let mut out = vec![T::zero(); c * h * w];
    for (k, f) in freqs.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let (ay, ax) = (y as f64 * f, x as f64 * f);
                let px = y * w + x;
                out[k * h * w + px] = T::lit(ay.sin());
                out[(bands + k) * h * w + px] = T::lit(ay.cos());
                out[(2 * bands + k) * h * w + px] = T::lit(ax.sin());
                out[(3 * bands + k) * h * w + px] = T::lit(ax.cos());
            }
        }
    }
    Tensor::new(out, &[c, h, w])
}

/// Width of [`posenc_points`] output for `freqs` octaves.
pub fn point_encoding_width(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// Lifts `[M,3]` points to `[p, sin(2^k π p), cos(2^k π p)]` for `k < freqs`.
pub fn posenc_points<T: Scalar>(points: &[[f64; 3]], freqs: usize) -> Result<Tensor<T>> {
    let width = point_encoding_width(freqs);
    let mut out = Vec::with_capacity(points.len() * width);
    for p in points {
        out.extend(p.iter().map(|v| T::lit(*v)));
        for k in 0..freqs {
            let f = std::f64::consts::PI * (1u64 << k) as f64;
            out.extend(p.iter().map(|v| T::lit((v * f).sin())));
            out.extend(p.iter().map(|v| T::lit((v * f).cos())));
        }
    }
    Tensor::new(out, &[points.len(), width])
}
