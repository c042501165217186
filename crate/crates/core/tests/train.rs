use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textsplat::decoder::DecoderConfig;
use textsplat::diff::gradcheck::{check_gradients, relative_error};
use textsplat::diff::{no_grad, ops, Tensor};
use textsplat::model::{Embedder, Model, ModelConfig};
use textsplat::splat::{render, Camera, RenderSettings};
use textsplat::textenc::{strip_direction, PromptSet, ViewDirection};
use textsplat::train::{
    accumulate_surrogate, make_procedural_targets, plan_step, sds_grad_shape, surrogate, train_mock, train_step,
    GuidanceModel, MockGuidance, StepPlan, TrainConfig,
};
use textsplat::tsd::TsdConfig;
use textsplat::ttg::TtgConfig;
use textsplat::Result;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_len: 4,
        embed_dim: 6,
        embed_seed: 3,
        n_side: 2,
        extent: 0.5,
        tsd: TsdConfig {
            d_model: 8,
            num_heads: 2,
            num_blocks: 1,
            ff_hidden: 16,
            point_freqs: 2,
            beta: 0.2,
        },
        ttg: TtgConfig {
            channels: 4,
            base_res: 2,
            upsamples: 1,
            low_blocks: 1,
            num_heads: 2,
            ff_mult: 2,
            extent: 0.8,
            single_generator: false,
        },
        decoder: DecoderConfig {
            hidden: 8,
            scale_min: -3.0,
            scale_max: -1.0,
            use_coordinates: true,
        },
        seed: 11,
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        batch_prompts: 2,
        cameras: 2,
        width: 16,
        height: 16,
        radius_range: (1.2, 1.6),
        background: [0.1, 0.2, 0.3],
        ..Default::default()
    }
}

fn prompts() -> PromptSet {
    PromptSet::new(vec!["a red owl".into(), "a blue panda".into(), "a green corgi".into()]).unwrap()
}

#[test]
fn mock_gradient_vanishes_at_target_and_is_linear_in_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = MockGuidance::new(1.5, [0.0; 3]);
    let target = m.target("a red owl, side view", 8, 8);
    let g = m.grad_image(&target, 8, 8, "a red owl, side view", 0.5, &mut rng).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
    let x: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random::<f64>()).collect();
    let g1 = m.grad_image(&x, 8, 8, "a red owl", 0.5, &mut rng).unwrap();
    let g2 = MockGuidance::new(3.0, [0.0; 3]).grad_image(&x, 8, 8, "a red owl", 0.5, &mut rng).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn procedural_targets() {
    let size = (24, 20);
    let a = make_procedural_targets("a corgi on a red chair", size, [0.0; 3]);
    assert_eq!(a, make_procedural_targets("a corgi on a red chair", size, [0.0; 3]));
    assert_eq!(a, make_procedural_targets("a corgi on a red chair, back view", size, [0.0; 3]));
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    // changing only the color word keeps the silhouette
    let b = make_procedural_targets("a corgi on a blue chair", size, [0.0; 3]);
    let mask = |img: &[f64]| img.chunks(3).map(|p| p != [0.0; 3]).collect::<Vec<_>>();
    assert_eq!(mask(&a), mask(&b));
    assert_ne!(a, b);
    let set = PromptSet::builtin();
    let targets: Vec<Vec<f64>> = set.iter().map(|p| make_procedural_targets(p, (32, 32), [0.0; 3])).collect();
    for i in 0..targets.len() {
        for j in i + 1..targets.len() {
            assert_ne!(targets[i], targets[j], "prompts {i} and {j}");
        }
    }
}

/// Gradient independent of the image, standing in for an arbitrary denoiser.
struct FieldGuidance(Vec<f64>);

impl GuidanceModel for FieldGuidance {
    fn grad_image(&self, _: &[f64], _: usize, _: usize, _: &str, t: f64, _: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(self.0.iter().map(|v| v * self.weight(t)).collect())
    }

    fn weight(&self, t: f64) -> f64 {
        1.0 - t
    }
}

fn fixed_plan(prompt: &str) -> StepPlan {
    StepPlan {
        prompts: vec![prompt.to_string()],
        cameras: vec![vec![Camera::orbit(20.0, 25.0, 1.4, 49.1, 16, 16)]],
        timesteps: vec![vec![0.25]],
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences_for_any_guidance() {
    let cfg = tiny_config();
    let model = Model::<f64>::new(&cfg).unwrap();
    let embedder = Embedder::from_config(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let field: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let guidance = FieldGuidance(field);
    let plan = fixed_plan("a red owl");
    let tc = tiny_train();
    let inputs: Vec<Tensor<f64>> = model.store.iter().map(|(_, e)| e.tensor.clone()).collect();
    let r = check_gradients(&inputs, 1e-6, || {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(accumulate_surrogate(&model, &embedder, &guidance, None, &plan, &tc, &mut rng)?.0)
    })
    .unwrap();
    assert!(r.rel_error < 1e-3, "rel err {}", r.rel_error);
}

#[test]
fn mock_surrogate_equals_analytic_mse_gradient() {
    let cfg = tiny_config();
    let model = Model::<f64>::new(&cfg).unwrap();
    let embedder = Embedder::from_config(&cfg);
    let w = 0.7;
    let mock = MockGuidance::new(w, [0.1, 0.2, 0.3]);
    let cam = Camera::orbit(200.0, 30.0, 1.5, 49.1, 16, 16);
    let settings = RenderSettings { background: mock.background };
    let y = embedder.embed("a red owl").unwrap();

    let img = render(&model.forward_embedding(&y).unwrap().gaussians, &cam, &settings).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = sds_grad_shape(&img, &mock, "a red owl, back view", 0.3, &mut rng).unwrap();
    surrogate(&img, &g).unwrap().backward().unwrap();
    let surrogate_grad: Vec<f64> = model.store.iter().flat_map(|(_, e)| e.tensor.grad().unwrap()).collect();
    model.store.zero_grad();

    // w/2·||x − target||² differentiated through the graph
    let target = mock.target("a red owl", 16, 16);
    let img = render(&model.forward_embedding(&y).unwrap().gaussians, &cam, &settings).unwrap();
    let diff = ops::sub(&img.pixels, &Tensor::new(target, &[16, 16, 3]).unwrap()).unwrap();
    let loss = ops::scale(&ops::sum(&ops::mul(&diff, &diff).unwrap()), w / 2.0);
    loss.backward().unwrap();
    let direct: Vec<f64> = model.store.iter().flat_map(|(_, e)| e.tensor.grad().unwrap()).collect();
    let rel = relative_error(&surrogate_grad, &direct);
    assert!(rel < 1e-6, "rel err {rel}");
}

#[test]
fn batch_gradient_is_sum_of_view_gradients() {
    let cfg = tiny_config();
    let model = Model::<f64>::new(&cfg).unwrap();
    let embedder = Embedder::from_config(&cfg);
    let mock = MockGuidance::new(1.0, [0.0; 3]);
    let tc = tiny_train();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let plan = plan_step(&prompts(), &tc, &mut rng).unwrap();
    assert_eq!(plan.prompts.len(), 2);
    let grads = |plan: &StepPlan| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, _) = accumulate_surrogate(&model, &embedder, &mock, None, plan, &tc, &mut rng).unwrap();
        loss.backward().unwrap();
        let g: Vec<f64> = model.store.iter().flat_map(|(_, e)| e.tensor.grad().unwrap_or(vec![0.0; e.tensor.numel()])).collect();
        model.store.zero_grad();
        g
    };
    let whole = grads(&plan);
    let mut summed = vec![0.0; whole.len()];
    for p in 0..plan.prompts.len() {
        for c in 0..tc.cameras {
            let single = StepPlan {
                prompts: vec![plan.prompts[p].clone()],
                cameras: vec![vec![plan.cameras[p][c].clone()]],
                timesteps: vec![vec![plan.timesteps[p][c]]],
            };
            for (s, g) in summed.iter_mut().zip(grads(&single)) {
                *s += g;
            }
        }
    }
    assert!(relative_error(&whole, &summed) < 1e-12);
}

#[test]
fn guidance_prompts_carry_matching_direction() {
    let cfg = tiny_config();
    let mut model = Model::<f32>::new(&cfg).unwrap();
    let embedder = Embedder::from_config(&cfg);
    let mock = MockGuidance::new(1.0, [0.0; 3]);
    let tc = TrainConfig { cameras: 4, ..tiny_train() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seen = std::collections::BTreeSet::new();
    for iter in 0..12 {
        let m = train_step(&mut model, &embedder, &prompts(), &mock, Some(&mock), &tc, iter, &mut rng).unwrap();
        assert_eq!(m.views.len(), 8);
        for v in &m.views {
            let (base, dir) = strip_direction(&v.prompt_dir);
            assert_eq!(base, v.prompt);
            assert_eq!(dir, Some(ViewDirection::from_azimuth(v.camera.azimuth_deg())));
            let suffixes = [", front view", ", side view", ", back view"];
            assert_eq!(suffixes.iter().filter(|s| v.prompt_dir.contains(*s)).count(), 1);
            assert!(v.camera.position[2] >= 0.0);
            seen.insert(v.prompt_dir.rsplit(", ").next().unwrap().to_string());
        }
    }
    assert_eq!(seen.len(), 3);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = tiny_config();
    let mut model = Model::<f32>::new(&cfg).unwrap();
    let embedder = Embedder::from_config(&cfg);
    let mock = MockGuidance::new(1.0, [0.0; 3]);
    let mut tc = tiny_train();
    tc.adam.lr = 0.0;
    let before: Vec<u32> = model.store.flatten().iter().map(|v| v.to_bits()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = train_step(&mut model, &embedder, &prompts(), &mock, Some(&mock), &tc, 0, &mut rng).unwrap();
    assert!(m.grad_norm > 0.0);
    let after: Vec<u32> = model.store.flatten().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
}

#[test]
fn fixed_seed_gives_identical_traces() {
    let cfg = tiny_config();
    let run = || {
        let mut model = Model::<f32>::new(&cfg).unwrap();
        let embedder = Embedder::from_config(&cfg);
        let tc = TrainConfig {
            max_iter: 5,
            adam: textsplat::diff::AdamConfig { lr: 1e-2, ..Default::default() },
            ..tiny_train()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut log = Vec::new();
        let m = train_mock(&mut model, &embedder, &prompts(), &tc, &mut rng, Some(&mut log)).unwrap();
        let trace: Vec<(u64, u64)> = m.iter().map(|s| (s.loss.to_bits(), s.mse.to_bits())).collect();
        (trace, String::from_utf8(log).unwrap(), model.store.flatten())
    };
    let (a, log, pa) = run();
    let (b, _, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter\tloss\tmse\tgradnorm\tseconds");
    assert_eq!(lines.len(), 6);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 5));
}

struct NanGuidance;

impl GuidanceModel for NanGuidance {
    fn grad_image(&self, rgb: &[f64], _: usize, _: usize, _: &str, _: f64, _: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(vec![f64::NAN; rgb.len()])
    }

    fn weight(&self, _: f64) -> f64 {
        1.0
    }
}

#[test]
fn non_finite_guidance_aborts_step() {
    let cfg = tiny_config();
    let mut model = Model::<f32>::new(&cfg).unwrap();
    let embedder = Embedder::from_config(&cfg);
    let before = model.store.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = train_step(&mut model, &embedder, &prompts(), &NanGuidance, None, &tiny_train(), 0, &mut rng).unwrap_err();
    assert!(err.to_string().contains("view"), "{err}");
    assert_eq!(before, model.store.flatten());
}

#[test]
fn invalid_train_config_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = TrainConfig { cameras: 0, ..tiny_train() };
    assert!(plan_step(&prompts(), &bad, &mut rng).is_err());
    let bad = TrainConfig { timestep_range: (0.5, 0.2), ..tiny_train() };
    assert!(plan_step(&prompts(), &bad, &mut rng).is_err());
    no_grad(|| ());
}
