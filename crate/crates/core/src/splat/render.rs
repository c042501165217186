//! Tile-based Gaussian splatting with an analytic backward pass.

use crate::decoder::Gaussians;
use crate::diff::{Scalar, Tensor};
use crate::error::{Error, Result};

use super::camera::{Camera, View};

pub const SH_C0: f64 = 0.28209479177;
/// Isotropic screen-space dilation added to every projected covariance.
pub const DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const MIN_WEIGHT: f64 = 1.0 / 255.0;
pub const MIN_DET: f64 = 1e-12;
pub const TILE: usize = 16;

/// `2·ln(255)`: squared Mahalanobis radius beyond which a weight drops below
/// [`MIN_WEIGHT`].
fn cutoff_power() -> f64 {
    2.0 * 255f64.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { background: [0.0; 3] }
    }
}

/// Rendered colors as a differentiable `[H,W,3]` tensor plus per-pixel
/// accumulated opacity and residual transmittance.
pub struct RenderedImage<T: Scalar> {
    pub pixels: Tensor<T>,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> RenderedImage<T> {
    pub fn rgb(&self) -> Vec<f64> {
        self.pixels.data().iter().map(|v| v.as_f64()).collect()
    }
}

pub fn quat_to_rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Partial derivatives of [`quat_to_rotation`] with respect to `w, x, y, z`.
fn rotation_partials(q: [f64; 4]) -> [[[f64; 3]; 3]; 4] {
    let [w, x, y, z] = q;
    let t = 2.0;
    [
        [[0.0, -t * z, t * y], [t * z, 0.0, -t * x], [-t * y, t * x, 0.0]],
        [[0.0, t * y, t * z], [t * y, -2.0 * t * x, -t * w], [t * z, t * w, -2.0 * t * x]],
        [[-2.0 * t * y, t * x, t * w], [t * x, 0.0, t * z], [-t * w, t * z, -2.0 * t * y]],
        [[-2.0 * t * z, -t * w, t * x], [t * w, -2.0 * t * z, t * y], [t * x, t * y, 0.0]],
    ]
}

pub fn sh_to_color(dc: [f64; 3]) -> [f64; 3] {
    dc.map(|v| (SH_C0 * v + 0.5).clamp(0.0, 1.0))
}

/// Screen-space footprint of one Gaussian together with the intermediates
/// needed to differentiate it.
#[derive(Debug, Clone)]
pub struct Projection {
    /// Camera-space center.
    pub t: [f64; 3],
    pub mean: [f64; 2],
    /// Upper triangle `(xx, xy, yy)` of the dilated 2D covariance.
    pub cov: [f64; 3],
    /// Upper triangle of its inverse.
    pub conic: [f64; 3],
    /// Half-widths of the pixel box outside which the weight is below cutoff.
    pub radius: [f64; 2],
    jw: [[f64; 3]; 2],
    sigma: [[f64; 3]; 3],
    rot: [[f64; 3]; 3],
    scale: [f64; 3],
}

impl Projection {
    pub fn depth(&self) -> f64 {
        self.t[2]
    }

    /// Unclipped Gaussian weight at pixel center `(px, py)`.
    pub fn weight_at(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [a, b, c] = self.conic;
        (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp()
    }
}

/// Projects one Gaussian. `None` when it is outside the depth range or its
/// 2D covariance is numerically singular.
pub fn project_gaussian(view: &View, center: [f64; 3], scaling_raw: [f64; 3], quat: [f64; 4]) -> Option<Projection> {
    let t = view.to_camera(center);
    let tz = t[2];
    if tz <= view.near || tz > view.far {
        return None;
    }
    let rot = quat_to_rotation(quat);
    let scale = scaling_raw.map(f64::exp);
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma[i][j] = (0..3).map(|k| rot[i][k] * scale[k] * scale[k] * rot[j][k]).sum();
        }
    }
    let (fx, fy) = (view.fx, view.fy);
    let j = [
        [fx / tz, 0.0, -fx * t[0] / (tz * tz)],
        [0.0, fy / tz, -fy * t[1] / (tz * tz)],
    ];
    let w = &view.rotation;
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|k| j[r][k] * w[k][c]).sum();
        }
    }
    let mut cov2 = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            cov2[r][c] = (0..3)
                .map(|k| (0..3).map(|l| jw[r][k] * sigma[k][l] * jw[c][l]).sum::<f64>())
                .sum();
        }
    }
    let cov = [cov2[0][0] + DILATION, 0.5 * (cov2[0][1] + cov2[1][0]), cov2[1][1] + DILATION];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det >= MIN_DET) {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let k = cutoff_power();
    Some(Projection {
        t,
        mean: view.to_pixel(t),
        cov,
        conic,
        radius: [(k * cov[0]).sqrt(), (k * cov[2]).sqrt()],
        jw,
        sigma,
        rot,
        scale,
    })
}

/// Plain per-Gaussian inputs read out of the attribute tensors.
struct Scene {
    centers: Vec<[f64; 3]>,
    scales: Vec<[f64; 3]>,
    quats: Vec<[f64; 4]>,
    opacity: Vec<f64>,
    sh: Vec<[f64; 3]>,
}

fn rows<const N: usize, T: Scalar>(data: &[T]) -> Vec<[f64; N]> {
    data.chunks(N).map(|c| std::array::from_fn(|i| c[i].as_f64())).collect()
}

impl Scene {
    fn read<T: Scalar>(parents: &[Tensor<T>]) -> Self {
        Scene {
            centers: rows(&parents[0].data()),
            scales: rows(&parents[1].data()),
            quats: rows(&parents[2].data()),
            opacity: parents[3].data().iter().map(|v| v.as_f64()).collect(),
            sh: rows(&parents[4].data()),
        }
    }

    fn len(&self) -> usize {
        self.centers.len()
    }
}

/// Projections, colors and per-tile lists of Gaussians in depth order.
struct Prepared {
    proj: Vec<Option<Projection>>,
    colors: Vec<[f64; 3]>,
    tiles: Vec<Vec<usize>>,
    tiles_x: usize,
}

fn prepare(view: &View, scene: &Scene) -> Prepared {
    let proj: Vec<Option<Projection>> = (0..scene.len())
        .map(|i| project_gaussian(view, scene.centers[i], scene.scales[i], scene.quats[i]))
        .collect();
    let colors = scene.sh.iter().map(|dc| sh_to_color(*dc)).collect();
    let mut order: Vec<usize> = (0..scene.len()).filter(|&i| proj[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (proj[a].as_ref().unwrap().depth(), proj[b].as_ref().unwrap().depth());
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let tiles_x = view.width.div_ceil(TILE);
    let tiles_y = view.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let p = proj[i].as_ref().unwrap();
        // pixel px covers center px + 0.5; one pixel of margin on each side
        let lo_x = (p.mean[0] - p.radius[0] - 1.5).floor();
        let hi_x = (p.mean[0] + p.radius[0] + 0.5).ceil();
        let lo_y = (p.mean[1] - p.radius[1] - 1.5).floor();
        let hi_y = (p.mean[1] + p.radius[1] + 0.5).ceil();
        if hi_x < 0.0 || hi_y < 0.0 || lo_x >= view.width as f64 || lo_y >= view.height as f64 {
            continue;
        }
        let x0 = lo_x.max(0.0) as usize / TILE;
        let x1 = (hi_x.min(view.width as f64 - 1.0) as usize) / TILE;
        let y0 = lo_y.max(0.0) as usize / TILE;
        let y1 = (hi_y.min(view.height as f64 - 1.0) as usize) / TILE;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }
    Prepared { proj, colors, tiles, tiles_x }
}

/// One Gaussian's contribution at one pixel.
struct Hit {
    index: usize,
    weight: f64,
    alpha: f64,
    clipped: bool,
    d: [f64; 2],
    trans: f64,
}

fn pixel_hits(prep: &Prepared, opacity: &[f64], list: &[usize], px: f64, py: f64, hits: &mut Vec<Hit>) -> f64 {
    hits.clear();
    let mut trans = 1.0;
    for &i in list {
        let p = prep.proj[i].as_ref().unwrap();
        let w = p.weight_at(px, py);
        if w < MIN_WEIGHT {
            continue;
        }
        let raw = opacity[i] * w;
        let (alpha, clipped) = if raw > ALPHA_MAX { (ALPHA_MAX, true) } else { (raw, false) };
        hits.push(Hit {
            index: i,
            weight: w,
            alpha,
            clipped,
            d: [px - p.mean[0], py - p.mean[1]],
            trans,
        });
        trans *= 1.0 - alpha;
    }
    trans
}

fn tile_pixels(view: &View, tiles_x: usize, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let (w, h) = (view.width, view.height);
    (ty * TILE..((ty + 1) * TILE).min(h)).flat_map(move |y| (tx * TILE..((tx + 1) * TILE).min(w)).map(move |x| (x, y)))
}

fn check_inputs<T: Scalar>(g: &Gaussians<T>) -> Result<usize> {
    let m = g.len();
    if m == 0 {
        return Err(Error::InvalidArgument("cannot render an empty Gaussian set".into()));
    }
    let expect = [
        ("centers", &g.centers, 3),
        ("scaling_raw", &g.scaling_raw, 3),
        ("rotation", &g.rotation, 4),
        ("opacity", &g.opacity, 1),
        ("sh_dc", &g.sh_dc, 3),
    ];
    for (name, t, cols) in expect {
        if t.shape() != [m, cols] {
            return Err(Error::Dimension(format!("{name} has shape {:?}, expected [{m}, {cols}]", t.shape())));
        }
    }
    Ok(m)
}

/// Renders `g` from `cam`. The returned pixels are differentiable with
/// respect to centers, scaling, rotation, opacity and color; depth order is
/// held fixed under differentiation.
pub fn render<T: Scalar>(g: &Gaussians<T>, cam: &Camera, settings: &RenderSettings) -> Result<RenderedImage<T>> {
    check_inputs(g)?;
    let view = cam.view()?;
    let parents = vec![
        g.centers.clone(),
        g.scaling_raw.clone(),
        g.rotation.clone(),
        g.opacity.clone(),
        g.sh_dc.clone(),
    ];
    let scene = Scene::read(&parents);
    let prep = prepare(&view, &scene);
    let (w, h) = (view.width, view.height);
    let bg = settings.background;
    let mut rgb = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut transmittance = vec![0.0; w * h];
    let mut hits = Vec::new();
    for tile in 0..prep.tiles.len() {
        for (x, y) in tile_pixels(&view, prep.tiles_x, tile) {
            let pix = y * w + x;
            let trans = pixel_hits(&prep, &scene.opacity, &prep.tiles[tile], x as f64 + 0.5, y as f64 + 0.5, &mut hits);
            let mut acc = 0.0;
            let mut col = [0.0; 3];
            for hit in &hits {
                let wgt = hit.alpha * hit.trans;
                acc += wgt;
                for k in 0..3 {
                    col[k] += prep.colors[hit.index][k] * wgt;
                }
            }
            for k in 0..3 {
                rgb[pix * 3 + k] = col[k] + trans * bg[k];
            }
            alpha[pix] = acc;
            transmittance[pix] = trans;
        }
    }
    let data = rgb.iter().map(|v| T::lit(*v)).collect();
    let cam = view;
    let bg_c = bg;
    let pixels = Tensor::from_op(
        vec![h, w, 3],
        data,
        parents,
        Box::new(move |grad, _out, parents, needs| {
            let scene = Scene::read(parents);
            let prep = prepare(&cam, &scene);
            let grad: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
            let grads = backward(&cam, &scene, &prep, &grad, bg_c);
            grads
                .into_iter()
                .zip(needs)
                .map(|(g, &n)| n.then(|| g.into_iter().map(T::lit).collect()))
                .collect()
        }),
    );
    Ok(RenderedImage {
        pixels,
        alpha,
        transmittance,
        width: w,
        height: h,
    })
}

fn backward(view: &View, scene: &Scene, prep: &Prepared, grad: &[f64], bg: [f64; 3]) -> Vec<Vec<f64>> {
    let m = scene.len();
    let mut g_mean = vec![[0.0; 2]; m];
    let mut g_conic = vec![[0.0; 3]; m];
    let mut g_color = vec![[0.0; 3]; m];
    let mut g_opacity = vec![0.0; m];
    let mut hits = Vec::new();
    let w = view.width;
    for tile in 0..prep.tiles.len() {
        for (x, y) in tile_pixels(view, prep.tiles_x, tile) {
            let pix = y * w + x;
            let g = [grad[pix * 3], grad[pix * 3 + 1], grad[pix * 3 + 2]];
            let trans = pixel_hits(prep, &scene.opacity, &prep.tiles[tile], x as f64 + 0.5, y as f64 + 0.5, &mut hits);
            // color contributed by everything behind the current Gaussian
            let mut behind = [trans * bg[0], trans * bg[1], trans * bg[2]];
            for hit in hits.iter().rev() {
                let i = hit.index;
                let c = prep.colors[i];
                let wgt = hit.alpha * hit.trans;
                let mut d_alpha = 0.0;
                for k in 0..3 {
                    g_color[i][k] += wgt * g[k];
                    d_alpha += hit.trans * c[k] * g[k] - behind[k] * g[k] / (1.0 - hit.alpha);
                    behind[k] += c[k] * wgt;
                }
                if hit.clipped {
                    continue;
                }
                g_opacity[i] += hit.weight * d_alpha;
                let d_power = scene.opacity[i] * d_alpha * hit.weight;
                let [a, b, cc] = prep.proj[i].as_ref().unwrap().conic;
                let [dx, dy] = hit.d;
                g_mean[i][0] += d_power * (a * dx + b * dy);
                g_mean[i][1] += d_power * (b * dx + cc * dy);
                g_conic[i][0] += -0.5 * d_power * dx * dx;
                g_conic[i][1] += -d_power * dx * dy;
                g_conic[i][2] += -0.5 * d_power * dy * dy;
            }
        }
    }

    let mut d_centers = vec![0.0; m * 3];
    let mut d_scales = vec![0.0; m * 3];
    let mut d_quats = vec![0.0; m * 4];
    let mut d_sh = vec![0.0; m * 3];
    for i in 0..m {
        for k in 0..3 {
            let v = SH_C0 * scene.sh[i][k] + 0.5;
            if v > 0.0 && v < 1.0 {
                d_sh[i * 3 + k] = SH_C0 * g_color[i][k];
            }
        }
        let Some(p) = prep.proj[i].as_ref() else { continue };
        let dc = projection_backward(view, p, scene.quats[i], g_mean[i], g_conic[i]);
        d_centers[i * 3..i * 3 + 3].copy_from_slice(&dc.center);
        d_scales[i * 3..i * 3 + 3].copy_from_slice(&dc.scaling_raw);
        d_quats[i * 4..i * 4 + 4].copy_from_slice(&dc.quat);
    }
    vec![d_centers, d_scales, d_quats, g_opacity, d_sh]
}

struct ProjectionGrad {
    center: [f64; 3],
    scaling_raw: [f64; 3],
    quat: [f64; 4],
}

fn projection_backward(view: &View, p: &Projection, quat: [f64; 4], g_mean: [f64; 2], g_conic: [f64; 3]) -> ProjectionGrad {
    let [tx, ty, tz] = p.t;
    let (fx, fy) = (view.fx, view.fy);
    let q = [[p.conic[0], p.conic[1]], [p.conic[1], p.conic[2]]];
    let gq = [[g_conic[0], 0.5 * g_conic[1]], [0.5 * g_conic[1], g_conic[2]]];
    // d/dΣ' of a function of Σ'^{-1}
    let mut g_cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            g_cov[r][c] = -(0..2)
                .map(|k| (0..2).map(|l| q[r][k] * gq[k][l] * q[l][c]).sum::<f64>())
                .sum::<f64>();
        }
    }
    let jw = &p.jw;
    let sigma = &p.sigma;
    // Σ' = (JW) Σ (JW)ᵀ
    let mut g_jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            g_jw[r][c] = 2.0
                * (0..2)
                    .map(|k| g_cov[r][k] * (0..3).map(|l| jw[k][l] * sigma[l][c]).sum::<f64>())
                    .sum::<f64>();
        }
    }
    let mut g_sigma = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            g_sigma[r][c] = (0..2)
                .map(|k| (0..2).map(|l| jw[k][r] * g_cov[k][l] * jw[l][c]).sum::<f64>())
                .sum();
        }
    }
    let w = &view.rotation;
    let mut g_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            g_j[r][c] = (0..3).map(|k| g_jw[r][k] * w[c][k]).sum();
        }
    }
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let mut g_t = [0.0; 3];
    g_t[0] += g_mean[0] * fx / tz;
    g_t[1] += g_mean[1] * fy / tz;
    g_t[2] += -g_mean[0] * fx * tx / tz2 - g_mean[1] * fy * ty / tz2;
    g_t[0] += g_j[0][2] * (-fx / tz2);
    g_t[1] += g_j[1][2] * (-fy / tz2);
    g_t[2] += g_j[0][0] * (-fx / tz2)
        + g_j[0][2] * (2.0 * fx * tx / tz3)
        + g_j[1][1] * (-fy / tz2)
        + g_j[1][2] * (2.0 * fy * ty / tz3);
    let center = std::array::from_fn(|k| (0..3).map(|r| w[r][k] * g_t[r]).sum());

    // Σ = M Mᵀ with M = R·diag(s)
    let (rot, s) = (&p.rot, p.scale);
    let mut g_m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            g_m[r][c] = 2.0 * (0..3).map(|k| g_sigma[r][k] * rot[k][c] * s[c]).sum::<f64>();
        }
    }
    let scaling_raw = std::array::from_fn(|c| (0..3).map(|r| g_m[r][c] * rot[r][c]).sum::<f64>() * s[c]);
    let partials = rotation_partials(quat);
    let quat = std::array::from_fn(|n| {
        let mut acc = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                acc += g_m[r][c] * s[c] * partials[n][r][c];
            }
        }
        acc
    });
    ProjectionGrad {
        center,
        scaling_raw,
        quat,
    }
}
