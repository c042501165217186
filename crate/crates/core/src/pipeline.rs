//! End-to-end inference, run configuration, splat export and the invariant
//! checks behind the `check` command.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::GaussianSet;
use crate::diff::{checkpoint, no_grad, Scalar};
use crate::error::{Error, Result};
use crate::model::{Embedder, Generated, Model, ModelConfig};
use crate::splat::image::write_ppm;
use crate::splat::{render, Camera, RenderSettings};
use crate::textenc::{import_embeddings, interpolate, PromptSet, TextEmbedding};
use crate::train::{train_mock, StepMetrics, TrainConfig};

/// Every tunable, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub turntable_elevation: f64,
    pub turntable_radius: f64,
    /// One prompt per line; the builtin set when unset.
    pub prompt_file: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            turntable_elevation: 20.0,
            turntable_radius: 2.4,
            prompt_file: None,
            metrics_log: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_rgb(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("`{key}` needs three comma-separated values")));
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        let v = value.trim();
        match key {
            "embed_len" => m.embed_len = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "embed_seed" => m.embed_seed = parse(key, v)?,
            "n_side" => m.n_side = parse(key, v)?,
            "extent" => m.extent = parse(key, v)?,
            "beta" => m.tsd.beta = parse(key, v)?,
            "tsd_d_model" => m.tsd.d_model = parse(key, v)?,
            "tsd_heads" => m.tsd.num_heads = parse(key, v)?,
            "tsd_blocks" => m.tsd.num_blocks = parse(key, v)?,
            "tsd_ff_hidden" => m.tsd.ff_hidden = parse(key, v)?,
            "tsd_point_freqs" => m.tsd.point_freqs = parse(key, v)?,
            "ttg_channels" => m.ttg.channels = parse(key, v)?,
            "ttg_base_res" => m.ttg.base_res = parse(key, v)?,
            "ttg_upsamples" => m.ttg.upsamples = parse(key, v)?,
            "ttg_low_blocks" => m.ttg.low_blocks = parse(key, v)?,
            "ttg_heads" => m.ttg.num_heads = parse(key, v)?,
            "ttg_ff_mult" => m.ttg.ff_mult = parse(key, v)?,
            "ttg_extent" => m.ttg.extent = parse(key, v)?,
            "single_generator" => m.ttg.single_generator = parse_bool(key, v)?,
            "decoder_hidden" => m.decoder.hidden = parse(key, v)?,
            "scale_min" => m.decoder.scale_min = parse(key, v)?,
            "scale_max" => m.decoder.scale_max = parse(key, v)?,
            "use_coordinates" => m.decoder.use_coordinates = parse_bool(key, v)?,
            "seed" => m.seed = parse(key, v)?,
            "batch_prompts" => t.batch_prompts = parse(key, v)?,
            "cameras" => t.cameras = parse(key, v)?,
            "lr" => t.adam.lr = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "max_iter" => t.max_iter = parse(key, v)?,
            "train_seed" => t.seed = parse(key, v)?,
            "t_min" => t.timestep_range.0 = parse(key, v)?,
            "t_max" => t.timestep_range.1 = parse(key, v)?,
            "radius_min" => t.radius_range.0 = parse(key, v)?,
            "radius_max" => t.radius_range.1 = parse(key, v)?,
            "fov_y" => t.fov_y = parse(key, v)?,
            "width" => t.width = parse(key, v)?,
            "height" => t.height = parse(key, v)?,
            "background" => t.background = parse_rgb(key, v)?,
            "guidance_weight" => t.guidance_weight = parse(key, v)?,
            "turntable_elevation" => self.turntable_elevation = parse(key, v)?,
            "turntable_radius" => self.turntable_radius = parse(key, v)?,
            "prompt_file" => self.prompt_file = opt_path(v),
            "metrics_log" => self.metrics_log = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t) = (&self.model, &self.train);
        let bg = t.background;
        vec![
            ("embed_len", m.embed_len.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("embed_seed", m.embed_seed.to_string()),
            ("n_side", m.n_side.to_string()),
            ("extent", m.extent.to_string()),
            ("beta", m.tsd.beta.to_string()),
            ("tsd_d_model", m.tsd.d_model.to_string()),
            ("tsd_heads", m.tsd.num_heads.to_string()),
            ("tsd_blocks", m.tsd.num_blocks.to_string()),
            ("tsd_ff_hidden", m.tsd.ff_hidden.to_string()),
            ("tsd_point_freqs", m.tsd.point_freqs.to_string()),
            ("ttg_channels", m.ttg.channels.to_string()),
            ("ttg_base_res", m.ttg.base_res.to_string()),
            ("ttg_upsamples", m.ttg.upsamples.to_string()),
            ("ttg_low_blocks", m.ttg.low_blocks.to_string()),
            ("ttg_heads", m.ttg.num_heads.to_string()),
            ("ttg_ff_mult", m.ttg.ff_mult.to_string()),
            ("ttg_extent", m.ttg.extent.to_string()),
            ("single_generator", m.ttg.single_generator.to_string()),
            ("decoder_hidden", m.decoder.hidden.to_string()),
            ("scale_min", m.decoder.scale_min.to_string()),
            ("scale_max", m.decoder.scale_max.to_string()),
            ("use_coordinates", m.decoder.use_coordinates.to_string()),
            ("seed", m.seed.to_string()),
            ("batch_prompts", t.batch_prompts.to_string()),
            ("cameras", t.cameras.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("max_iter", t.max_iter.to_string()),
            ("train_seed", t.seed.to_string()),
            ("t_min", t.timestep_range.0.to_string()),
            ("t_max", t.timestep_range.1.to_string()),
            ("radius_min", t.radius_range.0.to_string()),
            ("radius_max", t.radius_range.1.to_string()),
            ("fov_y", t.fov_y.to_string()),
            ("width", t.width.to_string()),
            ("height", t.height.to_string()),
            ("background", format!("{},{},{}", bg[0], bg[1], bg[2])),
            ("guidance_weight", t.guidance_weight.to_string()),
            ("turntable_elevation", self.turntable_elevation.to_string()),
            ("turntable_radius", self.turntable_radius.to_string()),
            ("prompt_file", show_path(&self.prompt_file)),
            ("metrics_log", show_path(&self.metrics_log)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        Model::<f32>::new(&self.model).map(|_| ())
    }

    pub fn prompts(&self) -> Result<PromptSet> {
        match &self.prompt_file {
            None => Ok(PromptSet::builtin()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                PromptSet::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
            }
        }
    }

    pub fn turntable(&self) -> TurntableConfig {
        TurntableConfig {
            elevation: self.turntable_elevation,
            radius: self.turntable_radius,
            fov_y: self.train.fov_y,
            width: self.train.width,
            height: self.train.height,
            background: self.train.background,
        }
    }
}

/// A model, its prompt embeddings and the configuration that built them.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    pub embedder: Embedder,
}

/// Result of [`Pipeline::generate`] with its wall-clock latency.
pub struct GenerateReport {
    pub set: GaussianSet,
    pub latency: Duration,
}

impl fmt::Display for GenerateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "generated {} Gaussians in {:.3} ms",
            self.set.len(),
            self.latency.as_secs_f64() * 1e3
        )
    }
}

impl Pipeline {
    /// Freshly initialized parameters.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.train.validate()?;
        Ok(Pipeline {
            model: Model::new(&cfg.model)?,
            embedder: Embedder::from_config(&cfg.model),
            cfg: cfg.clone(),
        })
    }

    /// Parameters (and optimizer state) from `checkpoint`.
    pub fn load(cfg: &RunConfig, checkpoint_path: &Path) -> Result<Self> {
        let mut p = Pipeline::new(cfg)?;
        checkpoint::load(&mut p.model.store, checkpoint_path)?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.model.store, path)
    }

    /// Prefers embeddings from a TEMB file; ids index the prompt set.
    pub fn import_embeddings(&mut self, path: &Path, prompts: &PromptSet) -> Result<usize> {
        let map = import_embeddings(path, Some((self.cfg.model.embed_len, self.cfg.model.embed_dim)))?;
        for (id, e) in &map {
            let prompt = prompts
                .get(*id as usize)
                .ok_or_else(|| Error::format("TEMB", format!("id {id} outside the prompt set")))?;
            self.embedder.insert(prompt, e.clone())?;
        }
        Ok(map.len())
    }

    /// Embeddings of every prompt in `prompts`, keyed by id.
    pub fn embeddings_for(&self, prompts: &PromptSet) -> Result<BTreeMap<u32, TextEmbedding>> {
        prompts
            .iter()
            .enumerate()
            .map(|(i, p)| Ok((i as u32, self.embedder.embed(p)?)))
            .collect()
    }

    /// Forward pass with every intermediate kept.
    pub fn generate_full(&self, prompt: &str) -> Result<Generated<f32>> {
        let e = self.embedder.embed(prompt)?;
        no_grad(|| self.model.forward_embedding(&e))
    }

    pub fn generate(&self, prompt: &str) -> Result<GenerateReport> {
        let start = Instant::now();
        let gen = self.generate_full(prompt)?;
        let set = GaussianSet::from_gaussians(&gen.gaussians);
        Ok(GenerateReport {
            set,
            latency: start.elapsed(),
        })
    }

    /// Linear interpolation of the two prompt embeddings at `t = k/(steps−1)`.
    pub fn interpolate_prompts(&self, a: &str, b: &str, steps: usize) -> Result<Vec<GaussianSet>> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
        }
        let (ea, eb) = (self.embedder.embed(a)?, self.embedder.embed(b)?);
        (0..steps)
            .map(|k| {
                let t = k as f64 / (steps - 1) as f64;
                let e = interpolate(&ea, &eb, t)?;
                let gen = no_grad(|| self.model.forward_embedding(&e))?;
                Ok(GaussianSet::from_gaussians(&gen.gaussians))
            })
            .collect()
    }

    /// Trains with the mock guidance; metrics go to `log` and to the
    /// configured metrics file.
    pub fn train_mock(&mut self, prompts: &PromptSet, log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        let metrics = train_mock(&mut self.model, &self.embedder, prompts, &self.cfg.train, &mut rng, log)?;
        if let Some(path) = &self.cfg.metrics_log {
            let mut text = String::from(crate::train::METRICS_HEADER);
            text.push('\n');
            for m in &metrics {
                text.push_str(&m.line());
                text.push('\n');
            }
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(metrics)
    }
}

// ---- PLY ----

const PLY_PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

pub fn encode_ply(g: &GaussianSet) -> Result<Vec<u8>> {
    g.validate()?;
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", g.len()).into_bytes();
    for p in PLY_PROPERTIES {
        out.extend(format!("property float {p}\n").bytes());
    }
    out.extend(b"end_header\n");
    for i in 0..g.len() {
        let row = [
            &g.centers[i][..],
            &[0.0; 3],
            &g.sh_dc[i][..],
            &[g.opacity_logit[i]],
            &g.scaling_raw[i][..],
            &g.rotation[i][..],
        ];
        for v in row.iter().flat_map(|s| s.iter()) {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_ply(bytes: &[u8]) -> Result<GaussianSet> {
    let bad = |d: String| Error::format("PLY", d);
    let end = b"end_header\n";
    let header_len = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| bad("missing end_header".into()))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..header_len]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad count {n}")))?),
            ["element", other, ..] => return Err(bad(format!("unexpected element {other}"))),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, ..] => return Err(bad(format!("unsupported property type {ty}"))),
            ["comment", ..] | ["end_header"] | [] => {}
            _ => return Err(bad(format!("unrecognized header line `{line}`"))),
        }
    }
    let m = count.ok_or_else(|| bad("no vertex element".into()))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| bad(format!("missing property {name}")))
    };
    let cols: Vec<usize> = PLY_PROPERTIES.iter().map(|p| col(p)).collect::<Result<_>>()?;
    let stride = props.len() * 4;
    let body = &bytes[header_len..];
    if body.len() != m * stride {
        return Err(bad(format!("{} payload bytes for {m} vertices of {stride} bytes", body.len())));
    }
    let mut g = GaussianSet {
        centers: Vec::with_capacity(m),
        scaling_raw: Vec::with_capacity(m),
        rotation: Vec::with_capacity(m),
        opacity_logit: Vec::with_capacity(m),
        sh_dc: Vec::with_capacity(m),
    };
    for i in 0..m {
        let v = |k: usize| {
            let o = i * stride + cols[k] * 4;
            f32::from_le_bytes(body[o..o + 4].try_into().unwrap())
        };
        g.centers.push([v(0), v(1), v(2)]);
        g.sh_dc.push([v(6), v(7), v(8)]);
        g.opacity_logit.push(v(9));
        g.scaling_raw.push([v(10), v(11), v(12)]);
        g.rotation.push([v(13), v(14), v(15), v(16)]);
    }
    Ok(g)
}

pub fn export_ply(g: &GaussianSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ply(g)?).map_err(|e| Error::io(path, e))
}

pub fn import_ply(path: &Path) -> Result<GaussianSet> {
    decode_ply(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

// ---- turntable ----

#[derive(Debug, Clone, PartialEq)]
pub struct TurntableConfig {
    pub elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
}

pub struct TurntableReport {
    pub azimuths: Vec<f64>,
    /// `H×W×3` colors per frame.
    pub frames: Vec<Vec<f64>>,
    pub files: Vec<PathBuf>,
    pub seconds: f64,
}

impl TurntableReport {
    pub fn fps(&self) -> f64 {
        self.frames.len() as f64 / self.seconds.max(1e-9)
    }
}

impl fmt::Display for TurntableReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rendered {} frames in {:.3} ms ({:.1} FPS)",
            self.frames.len(),
            self.seconds * 1e3,
            self.fps()
        )
    }
}

/// Renders `frames` equally spaced azimuths starting at 0°. With `out_dir`,
/// frames are written as `frame_000.ppm`, `frame_001.ppm`, ...; the FPS
/// figure covers rendering only.
pub fn render_turntable(g: &GaussianSet, frames: usize, cfg: &TurntableConfig, out_dir: Option<&Path>) -> Result<TurntableReport> {
    if frames == 0 {
        return Err(Error::InvalidArgument("turntable needs at least one frame".into()));
    }
    g.validate()?;
    let gaussians = g.to_gaussians::<f32>();
    let settings = RenderSettings { background: cfg.background };
    let azimuths: Vec<f64> = (0..frames).map(|k| 360.0 * k as f64 / frames as f64).collect();
    let mut images = Vec::with_capacity(frames);
    let mut seconds = 0.0;
    for &az in &azimuths {
        let cam = Camera::orbit(az, cfg.elevation, cfg.radius, cfg.fov_y, cfg.width, cfg.height);
        let start = Instant::now();
        let img = no_grad(|| render(&gaussians, &cam, &settings))?;
        seconds += start.elapsed().as_secs_f64();
        images.push(img.rgb());
    }
    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, rgb) in images.iter().enumerate() {
            let path = dir.join(format!("frame_{k:03}.ppm"));
            write_ppm(&path, rgb, cfg.width, cfg.height)?;
            files.push(path);
        }
    }
    Ok(TurntableReport {
        azimuths,
        frames: images,
        files,
        seconds,
    })
}

// ---- self-checks ----

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// Bit patterns of every attribute, for exact comparisons.
pub fn set_bits(g: &GaussianSet) -> Vec<u32> {
    let mut out = Vec::with_capacity(g.len() * 16);
    for i in 0..g.len() {
        out.extend(g.centers[i].iter().map(|v| v.to_bits()));
        out.extend(g.scaling_raw[i].iter().map(|v| v.to_bits()));
        out.extend(g.rotation[i].iter().map(|v| v.to_bits()));
        out.push(g.opacity_logit[i].to_bits());
        out.extend(g.sh_dc[i].iter().map(|v| v.to_bits()));
    }
    out
}

/// Quick invariant checks on a freshly initialized model built from `cfg`.
pub fn run_checks(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let pipe = Pipeline::new(cfg)?;
    let prompts = ["a red apple", "a wooden chair", "a small blue car"];
    let mut out = Vec::new();

    let beta = cfg.model.tsd.beta;
    let mut max_off = 0.0f64;
    let (mut min_o, mut max_o) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_s, mut max_s) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut max_q = 0.0f64;
    for p in prompts {
        let gen = pipe.generate_full(p)?;
        for v in gen.deformation.offsets.data().iter() {
            max_off = max_off.max(v.as_f64().abs());
        }
        for v in gen.gaussians.opacity.data().iter() {
            min_o = min_o.min(v.as_f64());
            max_o = max_o.max(v.as_f64());
        }
        for v in gen.gaussians.scaling_raw.data().iter() {
            min_s = min_s.min(v.as_f64());
            max_s = max_s.max(v.as_f64());
        }
        for q in gen.gaussians.rotation.data().chunks(4) {
            let n = q.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            max_q = max_q.max((n - 1.0).abs());
        }
    }
    out.push(check("offset bound", max_off < beta, format!("max |offset| {max_off:.4} < {beta}")));
    let (a, b) = (cfg.model.decoder.scale_min, cfg.model.decoder.scale_max);
    out.push(check(
        "attribute ranges",
        min_o > 0.0 && max_o < 1.0 && min_s > a && max_s < b,
        format!("opacity in [{min_o:.4}, {max_o:.4}], log-scale in [{min_s:.3}, {max_s:.3}]"),
    ));
    out.push(check("unit quaternions", max_q < 1e-6, format!("max |norm - 1| {max_q:.2e}")));

    let first = pipe.generate(prompts[0])?;
    let again = pipe.generate(prompts[0])?;
    out.push(check(
        "deterministic generation",
        set_bits(&first.set) == set_bits(&again.set),
        format!("{} Gaussians compared bitwise", first.set.len()),
    ));
    let round = decode_ply(&encode_ply(&first.set)?)?;
    out.push(check(
        "ply round trip",
        set_bits(&round) == set_bits(&first.set),
        "binary little-endian, bitwise".into(),
    ));

    let tt = cfg.turntable();
    let cam = Camera::orbit(30.0, tt.elevation, tt.radius, tt.fov_y, 32, 32);
    let img = no_grad(|| render(&first.set.to_gaussians::<f64>(), &cam, &RenderSettings::default()))?;
    let cons = img
        .alpha
        .iter()
        .zip(&img.transmittance)
        .map(|(a, t)| (a + t - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(check("weight conservation", cons < 1e-6, format!("max |sum w + T - 1| {cons:.2e}")));

    let gen = pipe.generate_full(prompts[0])?;
    let before = (gen.triplane.xz.to_vec(), gen.triplane.yz.to_vec());
    let probe = Pipeline::new(cfg)?;
    let name = probe
        .model
        .store
        .names()
        .find(|n| n.starts_with("ttg.xy."))
        .map(String::from);
    let independent = match name {
        Some(name) => {
            probe.model.store.get(&name).unwrap().update_data(|d| d[0] += 0.5);
            let after = probe.generate_full(prompts[0])?;
            let same = |a: &[f32], b: &[f32]| a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()));
            let moved = !same(&after.triplane.xy.to_vec(), &gen.triplane.xy.to_vec());
            moved && same(&after.triplane.xz.to_vec(), &before.0) && same(&after.triplane.yz.to_vec(), &before.1)
        }
        // a single shared generator has no per-plane parameters
        None => false,
    };
    out.push(check("plane independence", independent, "perturbed an xy generator weight".into()));

    out.push(render_gradient_check(&first.set)?);
    Ok(out)
}

/// Finite-difference check of the renderer on the first few Gaussians.
fn render_gradient_check(set: &GaussianSet) -> Result<CheckResult> {
    use crate::decoder::Gaussians;
    use crate::diff::gradcheck::{check_gradients, probe_weights};
    use crate::diff::{ops, Tensor};

    let k = set.len().min(3);
    let param = |rows: Vec<f64>, w: usize| Tensor::<f64>::param(rows, &[k, w]);
    let flat = |f: &dyn Fn(usize) -> Vec<f32>| (0..k).flat_map(f).map(f64::from).collect::<Vec<_>>();
    let centers = param(flat(&|i| set.centers[i].to_vec()), 3)?;
    let scaling = param(flat(&|i| set.scaling_raw[i].map(|s| s.max(-2.5)).to_vec()), 3)?;
    let rotation = param(flat(&|i| set.rotation[i].to_vec()), 4)?;
    let opacity = param(flat(&|_| vec![0.6]), 1)?;
    let sh = param(flat(&|i| set.sh_dc[i].to_vec()), 3)?;
    let inputs = [centers.clone(), scaling.clone(), rotation.clone(), opacity.clone(), sh.clone()];
    let cam = Camera::orbit(15.0, 20.0, 2.4, 49.1, 16, 16);
    let w = probe_weights(16 * 16 * 3, 5);
    let r = check_gradients(&inputs, 1e-6, || {
        let g = Gaussians {
            centers: centers.clone(),
            scaling_raw: scaling.clone(),
            rotation: rotation.clone(),
            opacity_logit: opacity.clone(),
            opacity: opacity.clone(),
            sh_dc: sh.clone(),
        };
        ops::dot_const(&render(&g, &cam, &RenderSettings::default())?.pixels, &w)
    })?;
    Ok(check(
        "renderer gradients",
        r.rel_error < 1e-3,
        format!("relative error {:.2e} on {k} Gaussians", r.rel_error),
    ))
}
