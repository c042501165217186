//! Differentiable dense ops: elementwise arithmetic, reductions, matmul,
//! normalization, activations and the few reshapes the networks need.

use super::scalar::Scalar;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x - *y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -*v).collect())]),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x * *y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, p, needs| {
            let ga = needs[0].then(|| g.iter().zip(p[1].data().iter()).map(|(g, y)| *g * *y).collect());
            let gb = needs[1].then(|| g.iter().zip(p[0].data().iter()).map(|(g, x)| *g * *x).collect());
            vec![ga, gb]
        }),
    ))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::lit(s);
    let data = a.data().iter().map(|x| *x * s).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, _, _, _| vec![Some(g.iter().map(|v| *v * s).collect())]),
    )
}

pub fn add_scalar<T: Scalar>(a: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::lit(s);
    let data = a.data().iter().map(|x| *x + s).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g, _, _, _| vec![Some(g.to_vec())]),
    )
}

/// Sum of all elements, as a rank-0 tensor.
pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let total = a.data().iter().copied().sum();
    let n = a.numel();
    Tensor::from_op(
        Vec::new(),
        vec![total],
        vec![a.clone()],
        Box::new(move |g, _, _, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    scale(&sum(a), 1.0 / a.numel() as f64)
}

/// `Σ a_i · c_i` against a constant weight vector.
pub fn dot_const<T: Scalar>(a: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    if a.numel() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "dot_const",
            lhs: a.shape().to_vec(),
            rhs: vec![weights.len()],
        });
    }
    let total = a.data().iter().zip(weights).map(|(x, w)| *x * *w).sum();
    let w = weights.to_vec();
    Ok(Tensor::from_op(
        Vec::new(),
        vec![total],
        vec![a.clone()],
        Box::new(move |g, _, _, _| vec![Some(w.iter().map(|w| *w * g[0]).collect())]),
    ))
}

/// Adds `bias[n]` to every row of `x[.., n]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().unwrap_or(&0);
    if bias.shape() != [n] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks(n.max(1))
        .flat_map(|row| row.iter().zip(b.iter()).map(|(v, b)| *v + *b).collect::<Vec<_>>())
        .collect();
    drop(b);
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), bias.clone()],
        Box::new(move |g, _, _, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for row in g.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
                }
                acc
            });
            vec![Some(g.to_vec()), gb]
        }),
    ))
}

fn map_unary<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let data = x.data().iter().map(|v| f(*v)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, out, p, _| {
            let xin = p[0].data();
            vec![Some(
                g.iter()
                    .zip(xin.iter().zip(out))
                    .map(|(g, (x, y))| *g * df(*x, *y))
                    .collect(),
            )]
        }),
    )
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_unary(x, sigmoid_scalar, |_, y| y * (T::one() - y))
}

/// Margin that keeps [`sigmoid_open`] away from 0 and 1.
pub const OPEN_SIGMOID_EPS: f64 = 1e-6;

/// Sigmoid clamped to `[eps, 1 - eps]`, so that downstream affine maps stay
/// strictly inside their interval even where the float sigmoid saturates.
#[inline]
pub fn sigmoid_open_scalar<T: Scalar>(x: T) -> T {
    let eps = T::lit(OPEN_SIGMOID_EPS);
    sigmoid_scalar(x).max(eps).min(T::one() - eps)
}

pub fn sigmoid_open<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_unary(x, sigmoid_open_scalar, |x, y| {
        let s = sigmoid_scalar(x);
        if s == y {
            y * (T::one() - y)
        } else {
            T::zero()
        }
    })
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_unary(
        x,
        |v| v * sigmoid_scalar(v),
        |x, _| {
            let s = sigmoid_scalar(x);
            s * (T::one() + x * (T::one() - s))
        },
    )
}

pub fn exp<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map_unary(x, |v| v.exp(), |_, y| y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Silu => silu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

/// Matrix product over the last two axes. `a` may carry leading batch axes;
/// `b` either matches them or is a plain matrix shared across the batch.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (k2, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a.shape()[..a.rank() - 2];
    let b_batch = &b.shape()[..b.rank() - 2];
    let shared_b = b_batch.is_empty();
    if !shared_b && a_batch != b_batch {
        return Err(mismatch());
    }
    let batch = numel(a_batch);
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);

    let mut out = vec![T::zero(); batch * m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for bi in 0..batch {
            let ab = &ad[bi * m * k..(bi + 1) * m * k];
            let bb = if shared_b { &bd[..] } else { &bd[bi * k * n..(bi + 1) * k * n] };
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            gemm_nn(ab, bb, ob, m, k, n);
        }
    }

    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, p, needs| {
            let ad = p[0].data();
            let bd = p[1].data();
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = if shared_b { &bd[..] } else { &bd[bi * k * n..(bi + 1) * k * n] };
                    // dA = dC · Bᵀ
                    let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc = acc + gb[i * n + j] * bb[kk * n + j];
                            }
                            gab[i * k + kk] = acc;
                        }
                    }
                }
                ga
            });
            let gbm = needs[1].then(|| {
                let mut gbv = vec![T::zero(); bd.len()];
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &ad[bi * m * k..(bi + 1) * m * k];
                    let off = if shared_b { 0 } else { bi * k * n };
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        for kk in 0..k {
                            let av = ab[i * k + kk];
                            if av == T::zero() {
                                continue;
                            }
                            let row = &mut gbv[off + kk * n..off + (kk + 1) * n];
                            row.iter_mut()
                                .zip(&gb[i * n..(i + 1) * n])
                                .for_each(|(r, g)| *r = *r + av * *g);
                        }
                    }
                }
                gbv
            });
            vec![ga, gbm]
        }),
    ))
}

fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            orow.iter_mut()
                .zip(&b[kk * n..(kk + 1) * n])
                .for_each(|(o, bv)| *o = *o + av * *bv);
        }
    }
}

/// Transpose of a matrix `[m, n] -> [n, m]`.
pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "transpose expects a matrix, got {:?}",
            x.shape()
        )));
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let data = transpose_buf(&x.data(), m, n);
    Ok(Tensor::from_op(
        vec![n, m],
        data,
        vec![x.clone()],
        Box::new(move |g, _, _, _| vec![Some(transpose_buf(g, n, m))]),
    ))
}

fn transpose_buf<T: Scalar>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != x.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(|g, _, _, _| vec![Some(g.to_vec())]),
    ))
}

/// Slice `len` entries starting at `start` along the leading axis.
pub fn narrow_first<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.rank() == 0 || start + len > x.shape()[0] {
        return Err(Error::InvalidArgument(format!(
            "narrow {start}+{len} out of range for {:?}",
            x.shape()
        )));
    }
    let inner: usize = x.shape()[1..].iter().product();
    let total = x.numel();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    let data = x.data()[start * inner..(start + len) * inner].to_vec();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _, _, _| {
            let mut full = vec![T::zero(); total];
            full[start * inner..(start + len) * inner].copy_from_slice(g);
            vec![Some(full)]
        }),
    ))
}

/// Columns `start..start+len` of a matrix.
pub fn narrow_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 || start + len > x.shape()[1] {
        return Err(Error::InvalidArgument(format!(
            "narrow_cols {start}+{len} out of range for {:?}",
            x.shape()
        )));
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(m * len);
    for row in x.data().chunks(n) {
        data.extend_from_slice(&row[start..start + len]);
    }
    Ok(Tensor::from_op(
        vec![m, len],
        data,
        vec![x.clone()],
        Box::new(move |g, _, _, _| {
            let mut full = vec![T::zero(); m * n];
            for (i, grow) in g.chunks(len).enumerate() {
                full[i * n + start..i * n + start + len].copy_from_slice(grow);
            }
            vec![Some(full)]
        }),
    ))
}

/// Concatenates matrices with equal row counts side by side.
pub fn concat_cols<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let m = parts.first().map(|p| p.shape()[0]).unwrap_or(0);
    for p in parts {
        if p.rank() != 2 || p.shape()[0] != m {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let n: usize = widths.iter().sum();
    let mut data = vec![T::zero(); m * n];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for i in 0..m {
            data[i * n + off..i * n + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
        }
        off += w;
    }
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        parts.to_vec(),
        Box::new(move |g, _, _, needs| {
            let mut off = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let out = need.then(|| {
                        let mut pg = vec![T::zero(); m * w];
                        for i in 0..m {
                            pg[i * w..(i + 1) * w].copy_from_slice(&g[i * n + off..i * n + off + w]);
                        }
                        pg
                    });
                    off += w;
                    out
                })
                .collect()
        }),
    ))
}

/// Normalizes each row over the last axis, then applies `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::InvalidArgument("layer_norm on a scalar".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] || d == 0 {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let eps = T::lit(eps);
    let dn = T::lit(d as f64);
    let rows = x.numel() / d;
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, p, needs| {
            let gd = p[1].data();
            let mut gx = needs[0].then(|| vec![T::zero(); g.len()]);
            let mut gg = needs[1].then(|| vec![T::zero(); d]);
            let mut gbeta = needs[2].then(|| vec![T::zero(); d]);
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                if let Some(gg) = gg.as_mut() {
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * hr[j];
                    }
                }
                if let Some(gb) = gbeta.as_mut() {
                    for j in 0..d {
                        gb[j] = gb[j] + gr[j];
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    // dx = inv_std/d · (d·gh − Σgh − x̂·Σ(gh·x̂)), gh = g·gamma
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gd[j];
                        s1 = s1 + gh;
                        s2 = s2 + gh * hr[j];
                    }
                    let k = inv_std[r] / dn;
                    for j in 0..d {
                        let gh = gr[j] * gd[j];
                        gx[r * d + j] = k * (dn * gh - s1 - hr[j] * s2);
                    }
                }
            }
            vec![gx, gg, gbeta]
        }),
    ))
}

/// Softmax over the last axis, stabilized by subtracting the row max.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *x.shape().last().ok_or_else(|| Error::InvalidArgument("softmax on a scalar".into()))?;
    if k == 0 {
        return Err(Error::InvalidArgument("softmax over an empty axis".into()));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (orow, row) in out.chunks_mut(k).zip(x.data().chunks(k)) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (*v - mx).exp();
            total = total + *o;
        }
        orow.iter_mut().for_each(|o| *o = *o / total);
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, y, _, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gxr, gr), yr) in gx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                let dotp: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                for j in 0..k {
                    gxr[j] = yr[j] * (gr[j] - dotp);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// L2-normalizes each row of `x[M, n]`. Rows with norm below `min_norm` are
/// replaced by `fallback` and pass no gradient.
pub fn normalize_rows<T: Scalar>(x: &Tensor<T>, min_norm: f64, fallback: &[T]) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[1] != fallback.len() {
        return Err(Error::ShapeMismatch {
            op: "normalize_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![fallback.len()],
        });
    }
    let n = fallback.len();
    let min_norm = T::lit(min_norm);
    let norms: Vec<T> = x
        .data()
        .chunks(n)
        .map(|r| r.iter().map(|v| *v * *v).sum::<T>().sqrt())
        .collect();
    let mut out = vec![T::zero(); x.numel()];
    for ((orow, row), nrm) in out.chunks_mut(n).zip(x.data().chunks(n)).zip(&norms) {
        if *nrm < min_norm {
            orow.copy_from_slice(fallback);
        } else {
            orow.iter_mut().zip(row).for_each(|(o, v)| *o = *v / *nrm);
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, y, _, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (i, nrm) in norms.iter().enumerate() {
                if *nrm < min_norm {
                    continue;
                }
                let (gr, yr) = (&g[i * n..(i + 1) * n], &y[i * n..(i + 1) * n]);
                let dotp: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                for j in 0..n {
                    gx[i * n + j] = (gr[j] - yr[j] * dotp) / *nrm;
                }
            }
            vec![Some(gx)]
        }),
    ))
}
