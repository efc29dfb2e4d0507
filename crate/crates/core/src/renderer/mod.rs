//! Ray sampling, alpha compositing against the sky field, RGB decoding and
//! the training losses. Everything is generic over [`Real`] so the gradient
//! checker runs the same code at 64 bits.

pub mod train;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::{ActorFrame, FieldError, Scratch, SampleTape, SceneModel, SkyTape};
use crate::geometry::{Camera, Pose, Ray};
use crate::image::{Mask, RgbImage};
use crate::optimizer::OptimError;
use crate::real::{sigmoid, softplus, Real};

pub use train::{train_scene, write_log_csv, LossRow, TrainConfig, TrainingScene, TrainingView, LidarSweep};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("image {width}x{height} is not divisible by upsample factor {factor}")]
    Indivisible { width: u32, height: u32, factor: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("scene has no training views")]
    EmptyScene,
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// How colors are produced from composited features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RenderMode {
    /// One ray per output pixel, colors from the learned 1x1 projection.
    Direct,
    /// Rays at 1/factor resolution, colors from the convolutional upsampler.
    Upsample { factor: usize },
}

impl RenderMode {
    pub fn factor(&self) -> usize {
        match self {
            RenderMode::Direct => 1,
            RenderMode::Upsample { factor } => *factor,
        }
    }
}

/// Per-ray sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    /// Stratified random offsets when true, bin midpoints when false.
    pub jitter: bool,
    pub seed: u64,
    /// Stop marching once transmittance falls below this (0 disables).
    pub early_stop: f64,
    pub mode: RenderMode,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples: 64,
            near: 0.2,
            far: 100.0,
            jitter: false,
            seed: 0,
            early_stop: 1e-4,
            mode: RenderMode::Direct,
        }
    }
}

/// Fills `out` with one depth per equal bin of [t0, t1); uniform within the
/// bin when `jitter` carries (seed, ray index), the bin midpoint otherwise.
pub fn stratify(t0: f64, t1: f64, jitter: Option<(u64, u64)>, out: &mut [f64]) {
    let n = out.len();
    let bin = (t1 - t0) / n as f64;
    match jitter {
        Some((seed, index)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index);
            for (i, t) in out.iter_mut().enumerate() {
                *t = t0 + (i as f64 + rng.gen::<f64>()) * bin;
            }
        }
        None => {
            for (i, t) in out.iter_mut().enumerate() {
                *t = t0 + (i as f64 + 0.5) * bin;
            }
        }
    }
}

/// N stratified depths over the ray's [near, far), deterministic per
/// (seed, ray index).
pub fn sample_ray(ray: &Ray, n: usize, seed: u64, ray_index: u64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    stratify(ray.near, ray.far, Some((seed, ray_index)), &mut out);
    out
}

/// Opacity of a segment of length `delta` with density softplus(s).
#[inline]
pub fn geometry_to_alpha<R: Real>(s: R, delta: R) -> R {
    -(-softplus(s) * delta).exp_m1()
}

/// d alpha / d s.
#[inline]
pub fn geometry_to_alpha_grad<R: Real>(s: R, delta: R) -> R {
    (-softplus(s) * delta).exp() * delta * sigmoid(s)
}

/// Result of compositing samples in front of the sky.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite<R> {
    pub feature: Vec<R>,
    pub weights: Vec<R>,
    pub t_res: R,
    pub depth: R,
}

impl<R: Real> Composite<R> {
    pub fn opacity(&self) -> R {
        R::one() - self.t_res
    }
}

/// Front-to-back compositing. `features` holds one row of `f_sky.len()`
/// values per sample; sky rays report `far` as depth.
pub fn composite<R: Real>(alphas: &[R], features: &[R], f_sky: &[R], ts: &[R], far: R) -> Composite<R> {
    let nf = f_sky.len();
    let mut feature = vec![R::zero(); nf];
    let mut weights = Vec::with_capacity(alphas.len());
    let mut trans = R::one();
    let mut depth = R::zero();
    for (k, &a) in alphas.iter().enumerate() {
        let w = trans * a;
        weights.push(w);
        for (acc, f) in feature.iter_mut().zip(&features[k * nf..(k + 1) * nf]) {
            *acc += w * *f;
        }
        depth += w * ts[k];
        trans *= R::one() - a;
    }
    for (acc, f) in feature.iter_mut().zip(f_sky) {
        *acc += trans * *f;
    }
    depth += trans * far;
    Composite {
        feature,
        weights,
        t_res: trans,
        depth,
    }
}

/// Composited outputs of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayOutput<R> {
    pub feature: Vec<R>,
    pub depth: R,
    pub opacity: R,
}

/// Per-ray buffers: sample tapes for backward and the compositing state.
pub struct RayWorkspace<R> {
    tapes: Vec<SampleTape<R>>,
    active: Vec<bool>,
    ts: Vec<f64>,
    alphas: Vec<R>,
    trans: Vec<R>,
    sky: SkyTape<R>,
    scratch: Scratch<R>,
    delta: f64,
    far: f64,
    t_res: R,
    d_f: Vec<R>,
    pub out: RayOutput<R>,
}

impl<R: Real> RayWorkspace<R> {
    pub fn new(model: &SceneModel<R>, samples: usize) -> Self {
        let nf = model.config.appearance_dim;
        Self {
            tapes: (0..samples).map(|_| model.new_tape()).collect(),
            active: vec![false; samples],
            ts: vec![0.0; samples],
            alphas: vec![R::zero(); samples],
            trans: vec![R::zero(); samples],
            sky: model.new_sky_tape(),
            scratch: model.new_scratch(),
            delta: 0.0,
            far: 0.0,
            t_res: R::one(),
            d_f: vec![R::zero(); nf],
            out: RayOutput {
                feature: vec![R::zero(); nf],
                depth: R::zero(),
                opacity: R::zero(),
            },
        }
    }

    /// Sample depths of the last traced ray.
    pub fn depths(&self) -> &[f64] {
        &self.ts
    }

    pub fn alphas(&self) -> &[R] {
        &self.alphas
    }
}

/// Forward pass of one ray. Samples cover the part of [near, far) inside the
/// scene bounds; points outside the bounds and outside every actor box are
/// empty space.
pub fn trace_ray<R: Real>(
    model: &SceneModel<R>,
    params: &[R],
    ray: &Ray,
    frame: &ActorFrame,
    settings: &RenderSettings,
    ray_index: u64,
    ws: &mut RayWorkspace<R>,
) {
    let n = settings.samples;
    let nf = model.config.appearance_dim;
    let (t0, t1) = match model.scene_aabb.intersect(&ray.origin, &ray.direction) {
        Some((a, b)) => (a.max(ray.near), b.min(ray.far)),
        None => (ray.near, ray.near),
    };
    let empty = !(t1 > t0);
    let (t0, t1) = if empty { (ray.near, ray.far) } else { (t0, t1) };
    stratify(t0, t1, settings.jitter.then_some((settings.seed, ray_index)), &mut ws.ts);
    ws.delta = (t1 - t0) / n as f64;
    ws.far = ray.far;
    let d = [ray.direction.x, ray.direction.y, ray.direction.z];
    model.sky_forward(params, &d, &mut ws.sky);

    let delta = R::of(ws.delta);
    let out = &mut ws.out;
    out.feature.iter_mut().for_each(|v| *v = R::zero());
    let mut trans = R::one();
    let mut depth = R::zero();
    for k in 0..n {
        ws.trans[k] = trans;
        ws.active[k] = false;
        ws.alphas[k] = R::zero();
        if empty || (settings.early_stop > 0.0 && trans.f64() < settings.early_stop) {
            continue;
        }
        let p = ray.at(ws.ts[k]);
        let Some(q) = model.locate(frame, &p) else {
            continue;
        };
        let tape = &mut ws.tapes[k];
        let s = model.forward_sample(params, q, tape);
        let a = geometry_to_alpha(s, delta);
        ws.active[k] = true;
        ws.alphas[k] = a;
        let w = trans * a;
        for (acc, f) in out.feature.iter_mut().zip(tape.f()) {
            *acc += w * *f;
        }
        depth += w * R::of(ws.ts[k]);
        trans *= R::one() - a;
    }
    let f_sky = ws.sky.feature(model);
    for c in 0..nf {
        out.feature[c] += trans * f_sky[c];
    }
    out.depth = depth + trans * R::of(ray.far);
    out.opacity = R::one() - trans;
    ws.t_res = trans;
}

/// Backward pass of the last traced ray given dL/dfeature, dL/ddepth and
/// dL/dopacity. Uses the suffix form dL/dalpha_k = T_k (g.v_k - g.R_k),
/// where R_k is the composite of everything behind sample k.
pub fn backprop_ray<R: Real>(
    model: &SceneModel<R>,
    params: &[R],
    ws: &mut RayWorkspace<R>,
    d_feature: &[R],
    d_depth: R,
    d_opacity: R,
    grads: &mut [R],
) {
    let nf = model.config.appearance_dim;
    let f_sky = ws.sky.feature(model);
    let dot = |f: &[R]| f.iter().zip(d_feature).fold(R::zero(), |a, (x, y)| a + *x * *y);
    let mut g_behind = dot(f_sky) + d_depth * R::of(ws.far);
    let delta = R::of(ws.delta);
    for k in (0..ws.ts.len()).rev() {
        if !ws.active[k] {
            continue;
        }
        let tape = &ws.tapes[k];
        let a = ws.alphas[k];
        let tk = ws.trans[k];
        let g_here = dot(tape.f()) + d_depth * R::of(ws.ts[k]) + d_opacity;
        let d_alpha = tk * (g_here - g_behind);
        g_behind = a * g_here + (R::one() - a) * g_behind;
        let d_s = d_alpha * geometry_to_alpha_grad(tape.s(), delta);
        let w = tk * a;
        for c in 0..nf {
            ws.d_f[c] = w * d_feature[c];
        }
        model.backward_sample(params, tape, d_s, &ws.d_f, grads, &mut ws.scratch);
    }
    for c in 0..nf {
        ws.d_f[c] = ws.t_res * d_feature[c];
    }
    model.sky_backward(params, &ws.sky, &ws.d_f, grads, &mut ws.scratch);
}

/// Feature, depth and opacity of a single ray at time `t`.
pub fn render_ray<R: Real>(
    model: &SceneModel<R>,
    ray: &Ray,
    t: f64,
    settings: &RenderSettings,
    ray_index: u64,
) -> RayOutput<R> {
    let mut ws = RayWorkspace::new(model, settings.samples);
    trace_ray(model, model.params.values(), ray, &model.actor_frame(t), settings, ray_index, &mut ws);
    ws.out
}

/// Rendered camera view. Feature, depth and opacity live at the ray
/// resolution; rgb at the full camera resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub feature_width: usize,
    pub feature_height: usize,
    pub features: Vec<f32>,
    pub depth: Vec<f32>,
    pub opacity: Vec<f32>,
    pub rgb: RgbImage,
}

pub fn render_image<R: Real>(
    model: &SceneModel<R>,
    camera: &Camera,
    ego_pose: &Pose,
    t: f64,
    settings: &RenderSettings,
) -> Result<RenderOutput, RenderError> {
    let k = camera.intrinsics;
    let factor = settings.mode.factor();
    if factor == 0 || k.width as usize % factor != 0 || k.height as usize % factor != 0 {
        return Err(RenderError::Indivisible {
            width: k.width,
            height: k.height,
            factor,
        });
    }
    let low = Camera {
        intrinsics: k.downscaled(factor as u32),
        ..camera.clone()
    };
    let (w, h) = (low.intrinsics.width as usize, low.intrinsics.height as usize);
    let nf = model.config.appearance_dim;
    let params = model.params.values();
    let frame = model.actor_frame(t);
    let rows: Vec<(Vec<R>, Vec<R>, Vec<R>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut ws = RayWorkspace::new(model, settings.samples);
            let mut feats = Vec::with_capacity(w * nf);
            let mut depth = Vec::with_capacity(w);
            let mut opacity = Vec::with_capacity(w);
            for x in 0..w {
                let ray = low.unchecked_ray(x as f64 + 0.5, y as f64 + 0.5, ego_pose, settings.near, settings.far);
                trace_ray(model, params, &ray, &frame, settings, (y * w + x) as u64, &mut ws);
                feats.extend_from_slice(&ws.out.feature);
                depth.push(ws.out.depth);
                opacity.push(ws.out.opacity);
            }
            (feats, depth, opacity)
        })
        .collect();
    let mut features = Vec::with_capacity(w * h * nf);
    let mut depth = Vec::with_capacity(w * h);
    let mut opacity = Vec::with_capacity(w * h);
    for (f, d, o) in rows {
        features.extend(f);
        depth.extend(d);
        opacity.extend(o);
    }
    let rgb = match settings.mode {
        RenderMode::Direct => {
            let mut img = RgbImage::new(w, h);
            for (px, f) in features.chunks_exact(nf).enumerate() {
                let c = model.rgb_forward(params, f);
                img.set_pixel(px % w, px / w, c.map(|v| v.f64() as f32));
            }
            img
        }
        RenderMode::Upsample { factor } => {
            let input = upsampler_input(&features, &opacity, nf);
            let tape = model.layout.upsampler.forward(params, &input, h, w, factor);
            RgbImage {
                width: w * factor,
                height: h * factor,
                data: tape.rgb.iter().map(|v| v.f64() as f32).collect(),
            }
        }
    };
    let to32 = |v: Vec<R>| v.into_iter().map(|x| x.f64() as f32).collect::<Vec<f32>>();
    Ok(RenderOutput {
        feature_width: w,
        feature_height: h,
        features: to32(features),
        depth: to32(depth),
        opacity: to32(opacity),
        rgb,
    })
}

/// Interleaves per-pixel features with opacity as the upsampler input.
pub fn upsampler_input<R: Real>(features: &[R], opacity: &[R], nf: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(opacity.len() * (nf + 1));
    for (f, o) in features.chunks_exact(nf).zip(opacity) {
        out.extend_from_slice(f);
        out.push(*o);
    }
    out
}

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub sky: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            depth: 0.1,
            sky: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub rgb_loss: f64,
    pub depth_loss: f64,
    pub sky_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(rgb_loss: f64, depth_loss: f64, sky_loss: f64, w: &LossWeights) -> Self {
        Self {
            rgb_loss,
            depth_loss,
            sky_loss,
            total: w.rgb * rgb_loss + w.depth * depth_loss + w.sky * sky_loss,
        }
    }
}

/// Floor applied inside the logarithms of the cross-entropy.
pub const BCE_EPS: f64 = 1e-6;

/// Binary cross-entropy of `opacity` against `target` and its derivative.
/// Each log term is clamped at `BCE_EPS`; a clamped term has zero slope.
pub fn bce(opacity: f64, target: f64) -> (f64, f64) {
    let mut loss = 0.0;
    let mut grad = 0.0;
    if target > 0.0 {
        loss -= target * opacity.max(BCE_EPS).ln();
        if opacity > BCE_EPS {
            grad -= target / opacity;
        }
    }
    if target < 1.0 {
        let q = 1.0 - opacity;
        loss -= (1.0 - target) * q.max(BCE_EPS).ln();
        if q > BCE_EPS {
            grad += (1.0 - target) / q;
        }
    }
    (loss, grad)
}

/// Image-level losses. `gt_depth` lists (ray-grid pixel index, metric depth);
/// `gt_sky` is at the ray resolution with 1 marking sky.
pub fn compute_loss(
    pred: &RenderOutput,
    gt_rgb: &RgbImage,
    gt_depth: &[(usize, f64)],
    gt_sky: &Mask,
    weights: &LossWeights,
) -> Result<LossReport, RenderError> {
    if pred.rgb.width != gt_rgb.width || pred.rgb.height != gt_rgb.height {
        return Err(RenderError::Shape(format!(
            "rgb {}x{} vs {}x{}",
            pred.rgb.width, pred.rgb.height, gt_rgb.width, gt_rgb.height
        )));
    }
    if gt_sky.width != pred.feature_width || gt_sky.height != pred.feature_height {
        return Err(RenderError::Shape("sky mask does not match ray resolution".into()));
    }
    let n = pred.rgb.data.len() as f64;
    let rgb_loss = pred
        .rgb
        .data
        .iter()
        .zip(&gt_rgb.data)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n;
    let mut depth_loss = 0.0;
    for &(px, d) in gt_depth {
        let Some(pd) = pred.depth.get(px) else {
            return Err(RenderError::Shape(format!("depth pixel {px} out of range")));
        };
        depth_loss += (*pd as f64 - d).abs();
    }
    if !gt_depth.is_empty() {
        depth_loss /= gt_depth.len() as f64;
    }
    let sky_loss = pred
        .opacity
        .iter()
        .zip(&gt_sky.data)
        .map(|(o, m)| bce(*o as f64, if *m != 0 { 0.0 } else { 1.0 }).0)
        .sum::<f64>()
        / pred.opacity.len() as f64;
    Ok(LossReport::new(rgb_loss, depth_loss, sky_loss, weights))
}

/// What a training ray is supervised with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayTargetKind {
    Camera { rgb: [f32; 3], sky: bool },
    Lidar { depth: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayTarget {
    pub ray: Ray,
    pub time: f64,
    pub kind: RayTargetKind,
}

/// Normalizers of the per-term means over a whole batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub camera_rays: usize,
    pub lidar_rays: usize,
}

impl BatchNorm {
    pub fn of(targets: &[RayTarget]) -> Self {
        let camera_rays = targets
            .iter()
            .filter(|t| matches!(t.kind, RayTargetKind::Camera { .. }))
            .count();
        Self {
            camera_rays,
            lidar_rays: targets.len() - camera_rays,
        }
    }
}

/// Direct-mode loss terms of `targets` (already divided by the batch
/// normalizers), accumulating weighted gradients into `grads` when given.
/// Ray `i` uses stratification stream `first_index + i`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_batch<R: Real>(
    model: &SceneModel<R>,
    params: &[R],
    targets: &[RayTarget],
    first_index: u64,
    settings: &RenderSettings,
    weights: &LossWeights,
    norm: BatchNorm,
    mut grads: Option<&mut [R]>,
    ws: &mut RayWorkspace<R>,
) -> [f64; 3] {
    let nf = model.config.appearance_dim;
    let inv_cam = 1.0 / norm.camera_rays.max(1) as f64;
    let inv_lidar = 1.0 / norm.lidar_rays.max(1) as f64;
    let mut sums = [0.0; 3];
    let mut d_feature = vec![R::zero(); nf];
    for (i, target) in targets.iter().enumerate() {
        let frame = model.actor_frame(target.time);
        trace_ray(model, params, &target.ray, &frame, settings, first_index + i as u64, ws);
        d_feature.iter_mut().for_each(|v| *v = R::zero());
        let (d_depth, d_opacity) = match target.kind {
            RayTargetKind::Camera { rgb, sky } => {
                let pred = model.rgb_forward(params, &ws.out.feature);
                let mut d_rgb = [R::zero(); 3];
                for c in 0..3 {
                    let diff = pred[c].f64() - rgb[c] as f64;
                    sums[0] += diff * diff * inv_cam / 3.0;
                    d_rgb[c] = R::of(weights.rgb * 2.0 * diff * inv_cam / 3.0);
                }
                let (l, g) = bce(ws.out.opacity.f64(), if sky { 0.0 } else { 1.0 });
                sums[2] += l * inv_cam;
                if let Some(gr) = grads.as_deref_mut() {
                    let feature = ws.out.feature.clone();
                    model.rgb_backward(params, &feature, &pred, &d_rgb, gr, &mut d_feature);
                }
                (R::zero(), R::of(weights.sky * g * inv_cam))
            }
            RayTargetKind::Lidar { depth } => {
                let diff = ws.out.depth.f64() - depth;
                sums[1] += diff.abs() * inv_lidar;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (R::of(weights.depth * sign * inv_lidar), R::zero())
            }
        };
        if let Some(gr) = grads.as_deref_mut() {
            backprop_ray(model, params, ws, &d_feature, d_depth, d_opacity, gr);
        }
    }
    sums
}

/// Whole-batch loss (single worker), with gradients of `total` when asked.
pub fn batch_loss<R: Real>(
    model: &SceneModel<R>,
    params: &[R],
    targets: &[RayTarget],
    settings: &RenderSettings,
    weights: &LossWeights,
    grads: Option<&mut [R]>,
) -> LossReport {
    let mut ws = RayWorkspace::new(model, settings.samples);
    let s = accumulate_batch(model, params, targets, 0, settings, weights, BatchNorm::of(targets), grads, &mut ws);
    LossReport::new(s[0], s[1], s[2], weights)
}

/// Unit direction helper for callers holding arrays.
pub fn direction(v: [f64; 3]) -> Vector3<f64> {
    Vector3::from(v).normalize()
}

#[cfg(test)]
mod tests;
