use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Unrolls 3×3 zero-padded neighbourhoods into a `[cin·9, h·w]` matrix.
fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::zero(); cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[y * w + xx] = plane[sy * w + sx as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); cin * hw];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let idx = c * hw + sy * w + sx as usize;
                        x[idx] = x[idx] + row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// 3×3 cross-correlation with zero padding 1 and a per-channel bias.
pub fn conv2d_3x3<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::InvalidArgument(format!("conv2d expects [C,H,W], got {:?}", x.shape())));
    }
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if weight.rank() != 4 || weight.shape()[2..] != [3, 3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_3x3",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let cout = weight.shape()[0];
    if weight.shape()[1] != cin {
        return Err(Error::ChannelMismatch {
            op: "conv2d_3x3",
            expected: weight.shape()[1],
            actual: cin,
        });
    }
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_3x3 bias",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let hw = h * w;
    let k = cin * 9;
    let col = im2col(&x.data(), cin, h, w);
    let mut out = vec![T::zero(); cout * hw];
    {
        let wd = weight.data();
        let bd = bias.data();
        for o in 0..cout {
            let orow = &mut out[o * hw..(o + 1) * hw];
            orow.iter_mut().for_each(|v| *v = bd[o]);
            for kk in 0..k {
                let wv = wd[o * k + kk];
                if wv == T::zero() {
                    continue;
                }
                orow.iter_mut()
                    .zip(&col[kk * hw..(kk + 1) * hw])
                    .for_each(|(ov, cv)| *ov = *ov + wv * *cv);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![cout, h, w],
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, _, p, needs| {
            let gx = needs[0].then(|| {
                let wd = p[1].data();
                let mut gcol = vec![T::zero(); k * hw];
                for o in 0..cout {
                    let grow = &g[o * hw..(o + 1) * hw];
                    for kk in 0..k {
                        let wv = wd[o * k + kk];
                        if wv == T::zero() {
                            continue;
                        }
                        gcol[kk * hw..(kk + 1) * hw]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(c, gv)| *c = *c + wv * *gv);
                    }
                }
                col2im(&gcol, cin, h, w)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); cout * k];
                for o in 0..cout {
                    let grow = &g[o * hw..(o + 1) * hw];
                    for kk in 0..k {
                        gw[o * k + kk] = grow
                            .iter()
                            .zip(&col[kk * hw..(kk + 1) * hw])
                            .map(|(a, b)| *a * *b)
                            .sum();
                    }
                }
                gw
            });
            let gb = needs[2].then(|| (0..cout).map(|o| g[o * hw..(o + 1) * hw].iter().copied().sum()).collect());
            vec![gx, gw, gb]
        }),
    ))
}
