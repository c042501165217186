use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textsplat::diff::gradcheck::{check_gradients, probe_weights};
use textsplat::diff::{conv2d_3x3, grid_sample_bilinear, ops, upsample2x_bilinear, Tensor};

const H: f64 = 1e-5;

fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn param(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(rand_vec(n, seed, -1.0, 1.0), shape).unwrap()
}

fn probe(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    ops::dot_const(t, &probe_weights(t.numel(), seed)).unwrap()
}

#[test]
fn matmul_identity_and_selection() {
    let eye = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let b = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    assert_eq!(ops::matmul(&eye, &b).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    let row = Tensor::<f64>::new(vec![1.0, 0.0], &[1, 2]).unwrap();
    let col = Tensor::new(vec![5.0, 7.0], &[2, 1]).unwrap();
    let out = ops::matmul(&row, &col).unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.to_vec(), vec![5.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    let msg = ops::matmul(&a, &b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let a = param(&[4, 3], 1);
    let b = param(&[3, 5], 2);
    let r = check_gradients(&[a.clone(), b.clone()], H, || Ok(probe(&ops::matmul(&a, &b)?, 3))).unwrap();
    assert!(r.rel_error < 1e-6, "rel err {}", r.rel_error);
}

#[test]
fn batched_matmul_gradients() {
    let a = param(&[2, 3, 4], 4);
    let b = param(&[4, 2], 5);
    let r = check_gradients(&[a.clone(), b.clone()], H, || Ok(probe(&ops::matmul(&a, &b)?, 6))).unwrap();
    assert!(r.rel_error < 1e-6, "rel err {}", r.rel_error);
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x = param(&[2, 5, 5], 10);
    let w = param(&[3, 2, 3, 3], 11);
    let b = param(&[3], 12);
    let r = check_gradients(&[x.clone(), w.clone(), b.clone()], H, || {
        Ok(probe(&conv2d_3x3(&x, &w, &b)?, 13))
    })
    .unwrap();
    assert!(r.rel_error < 1e-5, "rel err {}", r.rel_error);
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::<f64>::full(&[4], 1.0);
    let zeros = Tensor::<f64>::zeros(&[4]);
    let x = Tensor::full(&[1, 4], 3.5);
    let y = ops::layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
    assert!(y.to_vec().iter().all(|v| *v == 0.0));

    let g = Tensor::<f64>::full(&[2], 1.0);
    let b = Tensor::<f64>::zeros(&[2]);
    let x = Tensor::new(vec![1.0, -1.0], &[1, 2]).unwrap();
    let y = ops::layer_norm(&x, &g, &b, 1e-14).unwrap().to_vec();
    assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_gradients() {
    let x = param(&[3, 8], 20);
    let g = param(&[8], 21);
    let b = param(&[8], 22);
    let r = check_gradients(&[x.clone(), g.clone(), b.clone()], H, || {
        Ok(probe(&ops::layer_norm(&x, &g, &b, 1e-5)?, 23))
    })
    .unwrap();
    assert!(r.rel_error < 1e-5, "rel err {}", r.rel_error);
}

#[test]
fn softmax_examples_and_oracle() {
    let one = Tensor::<f64>::new(vec![-4.2], &[1]).unwrap();
    assert_eq!(ops::softmax_lastdim(&one).unwrap().to_vec(), vec![1.0]);
    let flat = Tensor::<f64>::full(&[3], 0.7);
    for v in ops::softmax_lastdim(&flat).unwrap().to_vec() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let xs = rand_vec(9, 30, -3.0, 3.0);
    let y = ops::softmax_lastdim(&Tensor::new(xs.clone(), &[9]).unwrap()).unwrap().to_vec();
    let denom: f64 = xs.iter().map(|v| v.exp()).sum();
    for (yi, xi) in y.iter().zip(&xs) {
        assert!((yi - xi.exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradients() {
    let x = param(&[3, 5], 31);
    let r = check_gradients(&[x.clone()], H, || Ok(probe(&ops::softmax_lastdim(&x)?, 32))).unwrap();
    assert!(r.rel_error < 1e-5, "rel err {}", r.rel_error);
}

#[test]
fn activation_values_and_gradients() {
    let z = Tensor::<f64>::zeros(&[1]);
    assert_eq!(ops::sigmoid(&z).item(), 0.5);
    assert_eq!(ops::silu(&z).item(), 0.0);
    let x = param(&[12], 40);
    for kind in [ops::Activation::Silu, ops::Activation::Sigmoid] {
        let r = check_gradients(&[x.clone()], H, || Ok(probe(&ops::activation(&x, kind), 41))).unwrap();
        assert!(r.rel_error < 1e-7, "{kind:?} rel err {}", r.rel_error);
    }
}

/// Four-vertex bilinear formula for one channel, written out with explicit
/// neighbour lookups.
fn bilinear_oracle(plane: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let u = u.clamp(-1.0, 1.0);
    let v = v.clamp(-1.0, 1.0);
    let px = (u + 1.0) * 0.5 * (w as f64 - 1.0);
    let py = (v + 1.0) * 0.5 * (h as f64 - 1.0);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let at = |y: usize, x: usize| if y < h && x < w { plane[y * w + x] } else { 0.0 };
    let (ax, ay) = (px - x0 as f64, py - y0 as f64);
    at(y0, x0) * (1.0 - ax) * (1.0 - ay)
        + at(y0, x0 + 1) * ax * (1.0 - ay)
        + at(y0 + 1, x0) * (1.0 - ax) * ay
        + at(y0 + 1, x0 + 1) * ax * ay
}

#[test]
fn grid_sample_matches_four_vertex_oracle() {
    let (c, h, w, m) = (3, 6, 7, 20);
    let plane = rand_vec(c * h * w, 50, -2.0, 2.0);
    let coords = rand_vec(m * 2, 51, -1.0, 1.0);
    let out = grid_sample_bilinear(
        &Tensor::new(plane.clone(), &[c, h, w]).unwrap(),
        &Tensor::new(coords.clone(), &[m, 2]).unwrap(),
    )
    .unwrap()
    .to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for ch in 0..c {
            let o = bilinear_oracle(&plane[ch * h * w..(ch + 1) * h * w], h, w, coords[2 * i], coords[2 * i + 1]);
            worst = worst.max((o - out[i * c + ch]).abs());
        }
    }
    assert!(worst < 1e-12, "max abs diff {worst}");
}

#[test]
fn grid_sample_gradients_cover_plane_and_coords() {
    let plane = param(&[2, 4, 5], 52);
    let coords = Tensor::param(rand_vec(12, 53, -0.95, 0.95), &[6, 2]).unwrap();
    let r = check_gradients(&[plane.clone(), coords.clone()], H, || {
        Ok(probe(&grid_sample_bilinear(&plane, &coords)?, 54))
    })
    .unwrap();
    assert!(r.rel_error < 1e-5, "rel err {}", r.rel_error);
    assert!(coords.numel() > 0 && r.analytic[plane.numel()..].iter().any(|g| *g != 0.0));
}

fn upsample_oracle(x: &[f64], h: usize, w: usize, oy: usize, ox: usize) -> f64 {
    let src = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
        let i0 = s.floor() as usize;
        let i1 = if i0 + 1 < n { i0 + 1 } else { n - 1 };
        (i0.min(n - 1), i1, s - i0 as f64)
    };
    let (y0, y1, ly) = src(oy, h);
    let (x0, x1, lx) = src(ox, w);
    let top = x[y0 * w + x0] * (1.0 - lx) + x[y0 * w + x1] * lx;
    let bot = x[y1 * w + x0] * (1.0 - lx) + x[y1 * w + x1] * lx;
    top * (1.0 - ly) + bot * ly
}

#[test]
fn upsample_matches_per_pixel_oracle() {
    let (c, h, w) = (2, 3, 5);
    let x = rand_vec(c * h * w, 60, -1.0, 1.0);
    let y = upsample2x_bilinear(&Tensor::new(x.clone(), &[c, h, w]).unwrap()).unwrap().to_vec();
    let mut worst: f64 = 0.0;
    for ch in 0..c {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let o = upsample_oracle(&x[ch * h * w..(ch + 1) * h * w], h, w, oy, ox);
                worst = worst.max((o - y[ch * 4 * h * w + oy * 2 * w + ox]).abs());
            }
        }
    }
    assert!(worst < 1e-12, "max abs diff {worst}");
}

#[test]
fn upsample_gradients() {
    let x = param(&[2, 3, 4], 61);
    let r = check_gradients(&[x.clone()], H, || Ok(probe(&upsample2x_bilinear(&x)?, 62))).unwrap();
    assert!(r.rel_error < 1e-5, "rel err {}", r.rel_error);
}

#[test]
fn structural_op_gradients() {
    let x = param(&[4, 6], 70);
    let y = param(&[4, 2], 71);
    let r = check_gradients(&[x.clone(), y.clone()], H, || {
        let t = ops::transpose(&x)?;
        let n = ops::narrow_cols(&x, 1, 3)?;
        let c = ops::concat_cols(&[n, y.clone()])?;
        let r = ops::reshape(&c, &[20])?;
        let q = ops::normalize_rows(&ops::narrow_first(&x, 1, 2)?, 1e-8, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0])?;
        let total = ops::add(&probe(&t, 72), &probe(&r, 73))?;
        ops::add(&total, &probe(&q, 74))
    })
    .unwrap();
    assert!(r.rel_error < 1e-6, "rel err {}", r.rel_error);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..40), k in 1usize..6) {
        let rows = vals.len() / k;
        prop_assume!(rows > 0);
        let x = Tensor::new(vals[..rows * k].to_vec(), &[rows, k]).unwrap();
        let y = ops::softmax_lastdim(&x).unwrap().to_vec();
        for row in y.chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(vals in prop::collection::vec(-100.0f64..100.0, 8..64)) {
        let d = 8;
        let rows = vals.len() / d;
        let x = Tensor::new(vals[..rows * d].to_vec(), &[rows, d]).unwrap();
        let g = Tensor::full(&[d], 1.3);
        let b = Tensor::zeros(&[d]);
        let y = ops::layer_norm(&x, &g, &b, 1e-5).unwrap().to_vec();
        for row in y.chunks(d) {
            prop_assert!((row.iter().sum::<f64>() / d as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let x = Tensor::new(rand_vec(2 * 4 * 4, seed, -1.0, 1.0), &[2, 4, 4]).unwrap();
            let w = Tensor::new(rand_vec(2 * 2 * 9, seed + 1, -1.0, 1.0), &[2, 2, 3, 3]).unwrap();
            let y = conv2d_3x3(&x, &w, &Tensor::zeros(&[2])).unwrap();
            upsample2x_bilinear(&y).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
