//! Score-distillation style training against a pluggable guidance model.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, RngCore};

use crate::diff::params::fnv1a;
use crate::diff::{adam_step, ops, AdamConfig, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{Embedder, Model};
use crate::splat::{render, sample_camera, Camera, RenderSettings, RenderedImage};
use crate::textenc::{augment_direction, strip_direction, tokenize, PromptSet};

/// Supplies the image-space gradient `w(t)·(ε̂(z_t; y, t) − ε)` for a rendered
/// image and a direction-augmented prompt.
pub trait GuidanceModel {
    /// `rgb` is `H×W×3`, row-major; the result has the same layout.
    fn grad_image(&self, rgb: &[f64], width: usize, height: usize, prompt_dir: &str, t: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    fn weight(&self, t: f64) -> f64;
}

const COLOR_WORDS: [&str; 13] = [
    "red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "black", "white", "gray", "wooden", "golden",
];

fn is_color_word(token: &str) -> bool {
    COLOR_WORDS.contains(&token)
}

fn unit(h: u64, shift: u32) -> f64 {
    ((h >> shift) & 0xffff) as f64 / 65535.0
}

/// Deterministic target image for `prompt` (direction suffixes ignored):
/// a flat color chosen by the prompt's color words over a disk, box or
/// diamond silhouette chosen by its remaining words.
pub fn make_procedural_targets(prompt: &str, size: (usize, usize), background: [f64; 3]) -> Vec<f64> {
    let (base, _) = strip_direction(prompt);
    let tokens = tokenize(base);
    let colors: Vec<&str> = tokens.iter().map(|s| s.as_str()).filter(|t| is_color_word(t)).collect();
    let shape: Vec<&str> = tokens.iter().map(|s| s.as_str()).filter(|t| !is_color_word(t)).collect();
    let hc = fnv1a(colors.join(" ").as_bytes());
    let hs = fnv1a(shape.join(" ").as_bytes());
    let fill = [0.15 + 0.8 * unit(hc, 0), 0.15 + 0.8 * unit(hc, 16), 0.15 + 0.8 * unit(hc, 32)];
    let kind = hs % 3;
    let (w, h) = size;
    let hx = w as f64 * (0.16 + 0.3 * unit(hs, 8));
    let hy = h as f64 * (0.16 + 0.3 * unit(hs, 24));
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5 - cx) / hx, (y as f64 + 0.5 - cy) / hy);
            let inside = match kind {
                0 => u * u + v * v <= 1.0,
                1 => u.abs() <= 0.85 && v.abs() <= 0.85,
                _ => u.abs() + v.abs() <= 1.0,
            };
            out.extend(if inside { fill } else { background });
        }
    }
    out
}

/// Guidance whose noise prediction is `ε + (x − target)`, so the image
/// gradient is `w·(x − target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MockGuidance {
    pub weight: f64,
    pub background: [f64; 3],
}

impl MockGuidance {
    pub fn new(weight: f64, background: [f64; 3]) -> Self {
        MockGuidance { weight, background }
    }

    pub fn target(&self, prompt: &str, width: usize, height: usize) -> Vec<f64> {
        make_procedural_targets(prompt, (width, height), self.background)
    }
}

impl GuidanceModel for MockGuidance {
    fn grad_image(&self, rgb: &[f64], width: usize, height: usize, prompt_dir: &str, t: f64, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let target = self.target(prompt_dir, width, height);
        if rgb.len() != target.len() {
            return Err(Error::Dimension(format!("image has {} values, expected {}", rgb.len(), target.len())));
        }
        let w = self.weight(t);
        Ok(rgb.iter().zip(&target).map(|(x, y)| w * (x - y)).collect())
    }

    fn weight(&self, _t: f64) -> f64 {
        self.weight
    }
}

/// Image-space gradient for one rendered view; non-finite values are an error.
pub fn sds_grad_shape<T: Scalar>(
    x: &RenderedImage<T>,
    guidance: &dyn GuidanceModel,
    prompt_dir: &str,
    t: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let g = guidance.grad_image(&x.rgb(), x.width, x.height, prompt_dir, t, rng)?;
    if g.len() != x.width * x.height * 3 {
        return Err(Error::Dimension(format!("guidance returned {} values for a {}x{} image", g.len(), x.width, x.height)));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("guidance gradient at index {i} for `{prompt_dir}`")));
    }
    Ok(g)
}

/// `⟨stopgrad(g), x⟩`: its parameter gradient is `g` contracted with `∂x/∂θ`.
pub fn surrogate<T: Scalar>(x: &RenderedImage<T>, g: &[f64]) -> Result<Tensor<T>> {
    let w: Vec<T> = g.iter().map(|v| T::lit(*v)).collect();
    ops::dot_const(&x.pixels, &w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Prompts per iteration.
    pub batch_prompts: usize,
    /// Cameras per prompt.
    pub cameras: usize,
    pub adam: AdamConfig,
    pub max_iter: usize,
    pub seed: u64,
    pub timestep_range: (f64, f64),
    pub radius_range: (f64, f64),
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub guidance_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_prompts: 2,
            cameras: 2,
            adam: AdamConfig::default(),
            max_iter: 200,
            seed: 0,
            timestep_range: (0.02, 0.98),
            radius_range: (1.8, 2.4),
            fov_y: 49.1,
            width: 64,
            height: 64,
            background: [0.0; 3],
            guidance_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_prompts == 0 || self.cameras == 0 {
            return Err(Error::Config("batch_prompts and cameras must be at least 1".into()));
        }
        let (t0, t1) = self.timestep_range;
        if !(0.0 <= t0 && t0 <= t1 && t1 <= 1.0) {
            return Err(Error::Config(format!("timestep range ({t0}, {t1}) outside [0, 1]")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("render size must be nonzero".into()));
        }
        Ok(())
    }
}

/// One rendered view inside a step.
#[derive(Debug, Clone)]
pub struct ViewRecord {
    pub prompt: String,
    pub prompt_dir: String,
    pub camera: Camera,
    pub t: f64,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub iter: usize,
    pub loss: f64,
    /// Mean squared error to the mock target over all views, when the
    /// guidance exposes targets.
    pub mse: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    pub views: Vec<ViewRecord>,
}

impl StepMetrics {
    pub fn line(&self) -> String {
        format!("{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4}", self.iter, self.loss, self.mse, self.grad_norm, self.seconds)
    }
}

pub const METRICS_HEADER: &str = "iter\tloss\tmse\tgradnorm\tseconds";

/// Prompts and cameras for one iteration.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub prompts: Vec<String>,
    pub cameras: Vec<Vec<Camera>>,
    pub timesteps: Vec<Vec<f64>>,
}

pub fn plan_step<R: Rng + ?Sized>(prompts: &PromptSet, cfg: &TrainConfig, rng: &mut R) -> Result<StepPlan> {
    cfg.validate()?;
    let chosen: Vec<String> = if cfg.batch_prompts <= prompts.len() {
        let mut idx = sample(rng, prompts.len(), cfg.batch_prompts).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| prompts.get(i).unwrap().to_string()).collect()
    } else {
        (0..cfg.batch_prompts)
            .map(|_| prompts.get(rng.random_range(0..prompts.len())).unwrap().to_string())
            .collect()
    };
    let mut cameras = Vec::new();
    let mut timesteps = Vec::new();
    for _ in &chosen {
        let mut cams = Vec::new();
        let mut ts = Vec::new();
        for _ in 0..cfg.cameras {
            cams.push(sample_camera(rng, cfg.radius_range, cfg.fov_y, (cfg.width, cfg.height))?);
            let (t0, t1) = cfg.timestep_range;
            ts.push(if t0 == t1 { t0 } else { rng.random_range(t0..t1) });
        }
        cameras.push(cams);
        timesteps.push(ts);
    }
    Ok(StepPlan {
        prompts: chosen,
        cameras,
        timesteps,
    })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Builds the summed surrogate over every planned view. Each prompt is
/// generated once and rendered from its own cameras.
pub fn accumulate_surrogate<T: Scalar>(
    model: &Model<T>,
    embedder: &Embedder,
    guidance: &dyn GuidanceModel,
    targets: Option<&MockGuidance>,
    plan: &StepPlan,
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, Vec<ViewRecord>)> {
    let settings = RenderSettings { background: cfg.background };
    let mut total: Option<Tensor<T>> = None;
    let mut views = Vec::new();
    for (p, prompt) in plan.prompts.iter().enumerate() {
        let e = embedder.embed(prompt)?;
        let gen = model.forward_embedding(&e)?;
        for (cam, &t) in plan.cameras[p].iter().zip(&plan.timesteps[p]) {
            let img = render(&gen.gaussians, cam, &settings)?;
            let prompt_dir = augment_direction(prompt, cam.azimuth_deg());
            let g = sds_grad_shape(&img, guidance, &prompt_dir, t, rng)?;
            let term = surrogate(&img, &g)?;
            if !term.item().as_f64().is_finite() {
                return Err(Error::NonFinite(format!(
                    "surrogate loss for `{prompt}` at azimuth {:.1}",
                    cam.azimuth_deg()
                )));
            }
            let err = match targets {
                Some(m) => mse(&img.rgb(), &m.target(&prompt_dir, img.width, img.height)),
                None => f64::NAN,
            };
            views.push(ViewRecord {
                prompt: prompt.clone(),
                prompt_dir,
                camera: cam.clone(),
                t,
                mse: err,
            });
            total = Some(match total {
                None => term,
                Some(acc) => ops::add(&acc, &term)?,
            });
        }
    }
    Ok((total.expect("at least one view"), views))
}

/// Plans, accumulates the surrogate over `B×C` views, runs one backward pass
/// and one Adam step.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar, R: RngCore>(
    model: &mut Model<T>,
    embedder: &Embedder,
    prompts: &PromptSet,
    guidance: &dyn GuidanceModel,
    targets: Option<&MockGuidance>,
    cfg: &TrainConfig,
    iter: usize,
    rng: &mut R,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let plan = plan_step(prompts, cfg, rng)?;
    let (loss, views) = accumulate_surrogate(model, embedder, guidance, targets, &plan, cfg, rng)?;
    let loss_value = loss.item().as_f64();
    loss.backward()?;
    let grad_norm = model.store.grad_norm();
    if !grad_norm.is_finite() {
        model.store.zero_grad();
        return Err(Error::NonFinite(format!("gradient norm at iteration {iter}")));
    }
    adam_step(&mut model.store, &cfg.adam)?;
    let mse = views.iter().map(|v| v.mse).sum::<f64>() / views.len() as f64;
    Ok(StepMetrics {
        iter,
        loss: loss_value,
        mse,
        grad_norm,
        seconds: start.elapsed().as_secs_f64(),
        views,
    })
}

/// Runs `cfg.max_iter` steps with the mock guidance, writing one metrics line
/// per step to `log` when given.
pub fn train_mock<T: Scalar, R: RngCore>(
    model: &mut Model<T>,
    embedder: &Embedder,
    prompts: &PromptSet,
    cfg: &TrainConfig,
    rng: &mut R,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    let guidance = MockGuidance::new(cfg.guidance_weight, cfg.background);
    let mut out = Vec::with_capacity(cfg.max_iter);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
    }
    for iter in 0..cfg.max_iter {
        let m = train_step(model, embedder, prompts, &guidance, Some(&guidance), cfg, iter, rng)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", m.line()).map_err(|e| Error::io("metrics", e))?;
        }
        out.push(m);
    }
    Ok(out)
}

/// Means of consecutive non-overlapping windows of `size` values; a partial
/// trailing window is dropped.
pub fn window_means(values: &[f64], size: usize) -> Vec<f64> {
    values.chunks_exact(size).map(|c| c.iter().sum::<f64>() / size as f64).collect()
}
