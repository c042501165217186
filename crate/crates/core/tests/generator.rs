use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textsplat::decoder::{decode, sample_triplane, DecoderConfig, GaussianDecoder, Gaussians};
use textsplat::diff::gradcheck::{check_gradients, probe_weights};
use textsplat::diff::{ops, ParameterStore, Tensor};
use textsplat::textenc::embed;
use textsplat::tsd::{deform, make_anchor_grid, TsdConfig, TsdNetwork};
use textsplat::ttg::{generate_triplane, PlaneGenerator, Triplane, TriplaneGenerator, TtgConfig};

fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn probe(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    ops::dot_const(t, &probe_weights(t.numel(), seed)).unwrap()
}

fn scramble(store: &ParameterStore<f64>, seed: u64, amp: f64) {
    for (i, (_, e)) in store.iter().enumerate() {
        e.tensor.set_data(&rand_vec(e.tensor.numel(), seed + i as u64, -amp, amp)).unwrap();
    }
}

fn text(prompt: &str, len: usize, width: usize) -> Tensor<f64> {
    embed(prompt, len, width, 17).unwrap().to_tensor()
}

fn tsd(seed: u64, cfg: &TsdConfig, ctx: usize) -> (ParameterStore<f64>, TsdNetwork<f64>) {
    let mut store = ParameterStore::new(seed);
    let net = TsdNetwork::new(&mut store.root(), cfg, ctx).unwrap();
    (store, net)
}

#[test]
fn zeroed_head_gives_zero_offsets() {
    let (store, net) = tsd(1, &TsdConfig::default(), 16);
    scramble(&store, 10, 0.5);
    net.head.zero();
    let grid = make_anchor_grid(4, 1.0).unwrap();
    let d = deform(&net, &grid, &text("a corgi", 8, 16)).unwrap();
    assert!(d.offsets.to_vec().iter().all(|v| *v == 0.0));
    assert_eq!(d.centers.to_vec(), grid.to_tensor::<f64>().to_vec());
}

#[test]
fn offsets_bounded_by_beta_even_for_large_weights() {
    let cfg = TsdConfig::default();
    let grid = make_anchor_grid(4, 1.0).unwrap();
    for seed in 0..8 {
        let (store, net) = tsd(seed, &cfg, 16);
        scramble(&store, 100 * seed, 3.0);
        let d = deform(&net, &grid, &text(&format!("prompt {seed}"), 8, 16)).unwrap();
        let worst = d.offsets.to_vec().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < cfg.beta, "max offset {worst}");
    }
}

#[test]
fn deformed_centers_are_distinct_and_deterministic() {
    let (store, net) = tsd(3, &TsdConfig::default(), 16);
    scramble(&store, 30, 0.5);
    let grid = make_anchor_grid(4, 1.0).unwrap();
    let y = text("an owl", 8, 16);
    let a = deform(&net, &grid, &y).unwrap().centers.to_vec();
    let b = deform(&net, &grid, &y).unwrap().centers.to_vec();
    assert_eq!(a, b);
    let pts: Vec<&[f64]> = a.chunks(3).collect();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d: f64 = pts[i].iter().zip(pts[j]).map(|(p, q)| (p - q).powi(2)).sum();
            assert!(d > 1e-8);
        }
    }
    // text dependence
    let c = deform(&net, &grid, &text("a panda", 8, 16)).unwrap().centers.to_vec();
    assert_ne!(a, c);
    assert_eq!(grid.len(), 64);
}

#[test]
fn deform_gradients() {
    let cfg = TsdConfig {
        d_model: 8,
        num_heads: 2,
        num_blocks: 1,
        ff_hidden: 16,
        point_freqs: 2,
        beta: 0.2,
    };
    let (store, net) = tsd(5, &cfg, 6);
    scramble(&store, 50, 0.5);
    let grid = make_anchor_grid(2, 1.0).unwrap();
    let y = Tensor::param(rand_vec(3 * 6, 51, -1.0, 1.0), &[3, 6]).unwrap();
    let mut inputs = vec![y.clone()];
    inputs.extend(store.iter().map(|(_, e)| e.tensor.clone()));
    let r = check_gradients(&inputs, 1e-5, || Ok(probe(&deform(&net, &grid, &y)?.centers, 52))).unwrap();
    assert!(r.rel_error < 1e-5, "rel err {}", r.rel_error);
}

fn small_ttg() -> TtgConfig {
    TtgConfig {
        channels: 4,
        base_res: 2,
        upsamples: 1,
        low_blocks: 1,
        num_heads: 2,
        ff_mult: 2,
        extent: 1.0,
        single_generator: false,
    }
}

fn ttg(cfg: &TtgConfig, seed: u64, ctx: usize) -> (ParameterStore<f64>, TriplaneGenerator<f64>) {
    let mut store = ParameterStore::new(seed);
    let g = TriplaneGenerator::new(&mut store.root(), cfg, ctx, TriplaneGenerator::<f64>::default_seeds(seed)).unwrap();
    (store, g)
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.to_vec().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn triplane_shapes_follow_config() {
    let cfg = TtgConfig::default();
    let (_, g) = ttg(&cfg, 1, 16);
    let tri = g.generate(&text("a tabby cat", 8, 16), cfg.extent).unwrap();
    for p in tri.planes() {
        assert_eq!(p.shape(), &[16, 32, 32]);
    }
    assert_eq!(cfg.resolution(), 32);
}

#[test]
fn perturbing_one_generator_leaves_other_planes_untouched() {
    let cfg = small_ttg();
    let (store, g) = ttg(&cfg, 2, 6);
    let y = text("a corgi on a red chair", 5, 6);
    let before = g.generate(&y, 1.0).unwrap();
    let xy_names: Vec<String> = store.names().filter(|n| n.starts_with("ttg.xy.")).map(String::from).collect();
    assert!(!xy_names.is_empty());
    for name in &xy_names {
        let t = store.get(name).unwrap();
        let orig = t.to_vec();
        t.set_data(&orig.iter().map(|v| v + 0.37).collect::<Vec<_>>()).unwrap();
        let after = g.generate(&y, 1.0).unwrap();
        assert_eq!(bits(&after.xz), bits(&before.xz), "{name}");
        assert_eq!(bits(&after.yz), bits(&before.yz), "{name}");
        t.set_data(&orig).unwrap();
    }
    // the out_conv bias moves the xy plane itself
    let bias = store.get("ttg.xy.out_conv.bias").unwrap();
    bias.set_data(&[1.0; 4]).unwrap();
    assert_ne!(bits(&g.generate(&y, 1.0).unwrap().xy), bits(&before.xy));
}

#[test]
fn single_generator_couples_planes() {
    let cfg = TtgConfig {
        single_generator: true,
        ..small_ttg()
    };
    let (store, g) = ttg(&cfg, 3, 6);
    let y = text("a panda", 5, 6);
    let before = g.generate(&y, 1.0).unwrap();
    assert_eq!(before.xy.shape(), &[4, 4, 4]);
    let w = store.get("ttg.single.low0.res.conv1.weight").unwrap();
    w.set_data(&w.to_vec().iter().map(|v| v + 0.1).collect::<Vec<_>>()).unwrap();
    let after = g.generate(&y, 1.0).unwrap();
    assert_ne!(bits(&after.xy), bits(&before.xy));
    assert_ne!(bits(&after.xz), bits(&before.xz));
    assert_ne!(bits(&after.yz), bits(&before.yz));
}

#[test]
fn equal_seeds_give_identical_generators() {
    let cfg = small_ttg();
    let mut store = ParameterStore::<f64>::new(0);
    let g = TriplaneGenerator::new(&mut store.root(), &cfg, 6, [9, 9, 9]).unwrap();
    let tri = g.generate(&text("an owl", 5, 6), 1.0).unwrap();
    assert_eq!(bits(&tri.xy), bits(&tri.xz));
    assert_eq!(bits(&tri.xy), bits(&tri.yz));
    let (_, g2) = ttg(&cfg, 4, 6);
    let tri2 = g2.generate(&text("an owl", 5, 6), 1.0).unwrap();
    assert_ne!(bits(&tri2.xy), bits(&tri2.xz));
}

#[test]
fn mismatched_generators_rejected() {
    let mut store = ParameterStore::<f64>::new(0);
    let mut root = store.root();
    let a = PlaneGenerator::new(&mut root.sub("a"), &small_ttg(), 6, 4).unwrap();
    let b = PlaneGenerator::new(&mut root.sub("b"), &small_ttg(), 6, 4).unwrap();
    let c = PlaneGenerator::new(&mut root.sub("c"), &TtgConfig { upsamples: 2, ..small_ttg() }, 6, 4).unwrap();
    let y = text("x", 3, 6);
    assert!(generate_triplane(&a, &b, &c, &y, 1.0).is_err());
    assert!(generate_triplane(&a, &b, &b, &y, 1.0).is_ok());
}

#[test]
fn triplane_generator_gradients() {
    let cfg = small_ttg();
    let (store, g) = ttg(&cfg, 6, 6);
    scramble(&store, 60, 0.4);
    let y = Tensor::param(rand_vec(3 * 6, 61, -1.0, 1.0), &[3, 6]).unwrap();
    let mut inputs = vec![y.clone()];
    inputs.extend(store.iter().filter(|(n, _)| n.starts_with("ttg.xz.")).map(|(_, e)| e.tensor.clone()));
    let r = check_gradients(&inputs, 1e-5, || {
        let tri = g.generate(&y, 1.0)?;
        ops::add(&probe(&tri.xz, 62), &probe(&tri.yz, 63))
    })
    .unwrap();
    assert!(r.rel_error < 1e-5, "rel err {}", r.rel_error);
}

fn random_triplane(c: usize, r: usize, seed: u64, extent: f64, grad: bool) -> Triplane<f64> {
    let make = |s| {
        let v = rand_vec(c * r * r, s, -1.0, 1.0);
        if grad {
            Tensor::param(v, &[c, r, r]).unwrap()
        } else {
            Tensor::new(v, &[c, r, r]).unwrap()
        }
    };
    Triplane {
        xy: make(seed),
        xz: make(seed + 1),
        yz: make(seed + 2),
        extent,
    }
}

/// Bilinear lookup of `plane` at normalized `(u, v)`, `u` along width.
fn bilinear(plane: &[f64], c: usize, r: usize, u: f64, v: f64) -> Vec<f64> {
    let x = ((u.clamp(-1.0, 1.0) + 1.0) / 2.0) * (r - 1) as f64;
    let y = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * (r - 1) as f64;
    let (x0, y0) = ((x.floor() as usize).min(r - 2), (y.floor() as usize).min(r - 2));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    (0..c)
        .map(|ch| {
            let at = |yy: usize, xx: usize| plane[ch * r * r + yy * r + xx];
            at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy
        })
        .collect()
}

#[test]
fn triplane_sampling_matches_four_vertex_oracle() {
    let (c, r, extent) = (5, 7, 1.3);
    let tri = random_triplane(c, r, 70, extent, false);
    let pts = rand_vec(40 * 3, 71, -1.3, 1.3);
    let out = sample_triplane(&tri, &Tensor::new(pts.clone(), &[40, 3]).unwrap()).unwrap().to_vec();
    let (xy, xz, yz) = (tri.xy.to_vec(), tri.xz.to_vec(), tri.yz.to_vec());
    let mut worst = 0.0f64;
    for (m, p) in pts.chunks(3).enumerate() {
        let [x, y, z] = [p[0] / extent, p[1] / extent, p[2] / extent];
        let a = bilinear(&xy, c, r, x, y);
        let b = bilinear(&xz, c, r, x, z);
        let d = bilinear(&yz, c, r, y, z);
        for k in 0..c {
            worst = worst.max((out[m * c + k] - (a[k] + b[k] + d[k]) / 3.0).abs());
        }
    }
    assert!(worst < 1e-12, "max diff {worst}");
}

#[test]
fn constant_planes_and_origin_lookup() {
    let r = 5;
    let full = |v: f64| Tensor::new(vec![v; 2 * r * r], &[2, r, r]).unwrap();
    let tri = Triplane {
        xy: full(0.3),
        xz: full(-1.2),
        yz: full(2.4),
        extent: 1.0,
    };
    let pts = Tensor::new(rand_vec(12, 72, -1.0, 1.0), &[4, 3]).unwrap();
    for v in sample_triplane(&tri, &pts).unwrap().to_vec() {
        assert!((v - 0.5).abs() < 1e-12);
    }
    let tri = random_triplane(2, r, 73, 1.0, false);
    let f = sample_triplane(&tri, &Tensor::new(vec![0.0; 3], &[1, 3]).unwrap()).unwrap().to_vec();
    let mid = |t: &Tensor<f64>, ch: usize| t.to_vec()[ch * r * r + 2 * r + 2];
    for ch in 0..2 {
        let expect = (mid(&tri.xy, ch) + mid(&tri.xz, ch) + mid(&tri.yz, ch)) / 3.0;
        assert!((f[ch] - expect).abs() < 1e-12);
    }
}

#[test]
fn planes_share_gradient_equally() {
    let tri = random_triplane(3, 6, 74, 1.0, true);
    let centers = Tensor::new(rand_vec(10 * 3, 75, -0.9, 0.9), &[10, 3]).unwrap();
    let w = probe_weights(30, 76);
    ops::dot_const(&sample_triplane(&tri, &centers).unwrap(), &w).unwrap().backward().unwrap();
    let totals: Vec<f64> = tri.planes().iter().map(|p| p.grad().unwrap().iter().sum()).collect();
    let expect = w.iter().sum::<f64>() / 3.0;
    for t in totals {
        assert!((t - expect).abs() < 1e-12);
    }
}

fn decoder(cfg: &DecoderConfig, feat: usize, seed: u64) -> (ParameterStore<f64>, GaussianDecoder<f64>) {
    let mut store = ParameterStore::new(seed);
    let dec = GaussianDecoder::new(&mut store.root(), cfg, feat).unwrap();
    (store, dec)
}

fn attribute_probe(g: &Gaussians<f64>) -> textsplat::Result<Tensor<f64>> {
    let parts = [&g.centers, &g.scaling_raw, &g.rotation, &g.opacity, &g.sh_dc];
    let mut total = probe(parts[0], 80);
    for (i, p) in parts.iter().enumerate().skip(1) {
        total = ops::add(&total, &probe(p, 80 + i as u64))?;
    }
    Ok(total)
}

#[test]
fn zero_decoder_closed_form() {
    let (_, dec) = decoder(&DecoderConfig::default(), 4, 1);
    dec.zero();
    let g = decode(&dec, &Tensor::new(rand_vec(12, 81, -1.0, 1.0), &[3, 4]).unwrap(), &Tensor::zeros(&[3, 3])).unwrap();
    assert!(g.opacity.to_vec().iter().all(|v| *v == 0.5));
    assert!(g.scaling_raw.to_vec().iter().all(|v| *v == -6.0));
    assert_eq!(g.rotation.to_vec(), [1.0, 0.0, 0.0, 0.0].repeat(3));
    assert!(g.sh_dc.to_vec().iter().all(|v| *v == 0.0));
}

#[test]
fn attribute_ranges_hold_for_wild_parameters() {
    let cfg = DecoderConfig::default();
    for seed in 0..5 {
        let (store, dec) = decoder(&cfg, 6, seed);
        scramble(&store, 90 + 10 * seed, 4.0);
        let m = 200;
        let f = Tensor::new(rand_vec(m * 6, seed, -3.0, 3.0), &[m, 6]).unwrap();
        let c = Tensor::new(rand_vec(m * 3, seed + 1, -1.0, 1.0), &[m, 3]).unwrap();
        let g = decode(&dec, &f, &c).unwrap();
        assert!(g.opacity.to_vec().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(g.scaling_raw.to_vec().iter().all(|v| *v > -9.0 && *v < -3.0));
        for q in g.rotation.to_vec().chunks(4) {
            assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn decode_gradients() {
    let (store, dec) = decoder(&DecoderConfig { hidden: 8, ..Default::default() }, 4, 2);
    scramble(&store, 100, 0.8);
    let f = Tensor::param(rand_vec(5 * 4, 101, -1.0, 1.0), &[5, 4]).unwrap();
    let c = Tensor::param(rand_vec(5 * 3, 102, -1.0, 1.0), &[5, 3]).unwrap();
    let r = check_gradients(&[f.clone(), c.clone()], 1e-5, || attribute_probe(&decode(&dec, &f, &c)?)).unwrap();
    assert!(r.rel_error < 1e-4, "rel err {}", r.rel_error);
}

/// Gradient reaching the centers through the MLP input only; the triplane
/// path is held fixed by feeding detached features.
fn mlp_center_grad(use_coordinates: bool) -> Vec<f64> {
    let cfg = DecoderConfig {
        hidden: 8,
        use_coordinates,
        ..Default::default()
    };
    let (store, dec) = decoder(&cfg, 4, 3);
    scramble(&store, 110, 0.8);
    let centers = Tensor::param(rand_vec(6 * 3, 111, -1.0, 1.0), &[6, 3]).unwrap();
    let f = Tensor::new(rand_vec(6 * 4, 112, -1.0, 1.0), &[6, 4]).unwrap();
    let g = decode(&dec, &f, &centers).unwrap();
    // every attribute except the centers themselves
    let loss = [&g.scaling_raw, &g.rotation, &g.opacity, &g.sh_dc]
        .iter()
        .enumerate()
        .map(|(i, t)| probe(t, 113 + i as u64))
        .reduce(|a, b| ops::add(&a, &b).unwrap())
        .unwrap();
    loss.backward().unwrap();
    centers.grad().unwrap_or_else(|| vec![0.0; 18])
}

#[test]
fn coordinate_input_toggle_controls_center_gradient() {
    assert!(mlp_center_grad(true).iter().any(|v| *v != 0.0));
    assert!(mlp_center_grad(false).iter().all(|v| *v == 0.0));
}

#[test]
fn decoder_rejects_bad_inputs() {
    let bad = DecoderConfig {
        scale_min: -3.0,
        scale_max: -9.0,
        ..Default::default()
    };
    let mut store = ParameterStore::<f64>::new(0);
    assert!(GaussianDecoder::new(&mut store.root(), &bad, 4).is_err());
    let (_, dec) = decoder(&DecoderConfig::default(), 4, 1);
    assert!(decode(&dec, &Tensor::zeros(&[2, 5]), &Tensor::zeros(&[2, 3])).is_err());
}
