//! Bilinear resampling: point lookups into feature planes and 2× upscaling.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Corner indices and fractional offset along one axis for a normalized
/// coordinate under align-corners semantics. Returns `(i0, i1, frac, d_pix/d_coord)`.
#[inline]
fn axis_lookup<T: Scalar>(c: T, extent: usize) -> (usize, usize, T, T) {
    if extent == 1 {
        return (0, 0, T::zero(), T::zero());
    }
    let half = T::lit((extent - 1) as f64) * T::lit(0.5);
    let pix = (c + T::one()) * half;
    let i0 = (pix.floor().to_usize().unwrap_or(0)).min(extent - 2);
    let frac = pix - T::lit(i0 as f64);
    (i0, i0 + 1, frac, half)
}

/// Samples `plane[C,H,W]` at `coords[M,2]` (x along W, y along H, both in
/// [-1,1], align-corners). Coordinates outside the square are clamped and
/// pass no coordinate gradient. Returns `[M,C]`.
pub fn grid_sample_bilinear<T: Scalar>(plane: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    if plane.rank() != 3 {
        return Err(Error::InvalidArgument(format!("grid_sample expects [C,H,W], got {:?}", plane.shape())));
    }
    if coords.rank() != 2 || coords.shape()[1] != 2 {
        return Err(Error::ShapeMismatch {
            op: "grid_sample",
            lhs: plane.shape().to_vec(),
            rhs: coords.shape().to_vec(),
        });
    }
    let (c, h, w) = (plane.shape()[0], plane.shape()[1], plane.shape()[2]);
    let m = coords.shape()[0];
    let hw = h * w;
    let one = T::one();

    struct Tap<T> {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
        fx: T,
        fy: T,
        sx: T,
        sy: T,
    }

    let taps: Vec<Tap<T>> = coords
        .data()
        .chunks(2)
        .map(|p| {
            let (cx, cy) = (p[0], p[1]);
            let inside_x = cx >= -one && cx <= one;
            let inside_y = cy >= -one && cy <= one;
            let (x0, x1, fx, sx) = axis_lookup(cx.max(-one).min(one), w);
            let (y0, y1, fy, sy) = axis_lookup(cy.max(-one).min(one), h);
            Tap {
                x0,
                x1,
                y0,
                y1,
                fx,
                fy,
                sx: if inside_x { sx } else { T::zero() },
                sy: if inside_y { sy } else { T::zero() },
            }
        })
        .collect();

    let mut out = vec![T::zero(); m * c];
    {
        let pd = plane.data();
        for (i, t) in taps.iter().enumerate() {
            for ch in 0..c {
                let base = ch * hw;
                let v00 = pd[base + t.y0 * w + t.x0];
                let v01 = pd[base + t.y0 * w + t.x1];
                let v10 = pd[base + t.y1 * w + t.x0];
                let v11 = pd[base + t.y1 * w + t.x1];
                out[i * c + ch] = (one - t.fy) * ((one - t.fx) * v00 + t.fx * v01)
                    + t.fy * ((one - t.fx) * v10 + t.fx * v11);
            }
        }
    }

    Ok(Tensor::from_op(
        vec![m, c],
        out,
        vec![plane.clone(), coords.clone()],
        Box::new(move |g, _, p, needs| {
            let pd = p[0].data();
            let mut gp = needs[0].then(|| vec![T::zero(); c * hw]);
            let mut gc = needs[1].then(|| vec![T::zero(); m * 2]);
            for (i, t) in taps.iter().enumerate() {
                let (w00, w01) = ((one - t.fy) * (one - t.fx), (one - t.fy) * t.fx);
                let (w10, w11) = (t.fy * (one - t.fx), t.fy * t.fx);
                let mut dx = T::zero();
                let mut dy = T::zero();
                for ch in 0..c {
                    let gv = g[i * c + ch];
                    let base = ch * hw;
                    let (i00, i01) = (base + t.y0 * w + t.x0, base + t.y0 * w + t.x1);
                    let (i10, i11) = (base + t.y1 * w + t.x0, base + t.y1 * w + t.x1);
                    if let Some(gp) = gp.as_mut() {
                        gp[i00] = gp[i00] + gv * w00;
                        gp[i01] = gp[i01] + gv * w01;
                        gp[i10] = gp[i10] + gv * w10;
                        gp[i11] = gp[i11] + gv * w11;
                    }
                    if gc.is_some() {
                        let (v00, v01, v10, v11) = (pd[i00], pd[i01], pd[i10], pd[i11]);
                        dx = dx + gv * ((one - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                        dy = dy + gv * ((one - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    gc[i * 2] = dx * t.sx;
                    gc[i * 2 + 1] = dy * t.sy;
                }
            }
            vec![gp, gc]
        }),
    ))
}

/// Source taps `(i0, i1, w0, w1)` for each output index of a 2× half-pixel
/// (align-corners = false) resize of an axis with `n` samples.
fn upsample_taps<T: Scalar>(n: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = T::lit(src - i0 as f64);
            (i0, i1, T::one() - l, l)
        })
        .collect()
}

/// Bilinear 2× enlargement of `x[C,H,W]` to `[C,2H,2W]`.
pub fn upsample2x_bilinear<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape()[1] == 0 || x.shape()[2] == 0 {
        return Err(Error::InvalidArgument(format!("upsample expects non-empty [C,H,W], got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let mut out = vec![T::zero(); c * oh * ow];
    {
        let xd = x.data();
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, oh, ow],
        out,
        vec![x.clone()],
        Box::new(move |g, _, _, _| {
            let mut gx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                let gsrc = &g[ch * oh * ow..(ch + 1) * oh * ow];
                let gdst = &mut gx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = gsrc[oy * ow + ox];
                        gdst[y0 * w + x0] = gdst[y0 * w + x0] + gv * wy0 * wx0;
                        gdst[y0 * w + x1] = gdst[y0 * w + x1] + gv * wy0 * wx1;
                        gdst[y1 * w + x0] = gdst[y1 * w + x0] + gv * wy1 * wx0;
                        gdst[y1 * w + x1] = gdst[y1 * w + x1] + gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}
