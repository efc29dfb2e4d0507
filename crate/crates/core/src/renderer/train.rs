//! Per-scene training loop.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    accumulate_batch, backprop_ray, bce, trace_ray, upsampler_input, BatchNorm, LossReport, LossWeights,
    RayTarget, RayTargetKind, RayWorkspace, RenderError, RenderMode, RenderSettings,
};
use crate::fields::{Aabb, FieldConfig, SceneModel};
use crate::geometry::{ActorTrack, Camera, Pose, Ray};
use crate::image::{Mask, RgbImage};
use crate::optimizer::{adam_step, AdamConfig, AdamState};
use crate::real::Real;

/// One captured camera image with its pose and sky mask.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub frame: usize,
    pub is_key_frame: bool,
    pub time: f64,
    pub camera: Camera,
    pub ego_pose: Pose,
    pub image: RgbImage,
    pub sky_mask: Mask,
}

/// One lidar sweep: world-frame sensor origin and hit points.
#[derive(Debug, Clone)]
pub struct LidarSweep {
    pub frame: usize,
    pub is_key_frame: bool,
    pub time: f64,
    pub origin: [f64; 3],
    pub points: Vec<[f64; 3]>,
}

/// Everything a scene is trained from.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub views: Vec<TrainingView>,
    pub lidar: Vec<LidarSweep>,
    pub tracks: Vec<ActorTrack>,
    pub scene_aabb: Aabb,
    pub time_range: (f64, f64),
}

impl TrainingScene {
    /// Bounds covering every lidar hit and camera center, padded sideways by
    /// `pad` meters and upwards by `top_pad`.
    pub fn bounds_from_data(views: &[TrainingView], lidar: &[LidarSweep], pad: f64, top_pad: f64) -> Option<Aabb> {
        let origins: Vec<[f64; 3]> = views
            .iter()
            .map(|v| v.camera.world_pose(&v.ego_pose).translation_array())
            .collect();
        let points = lidar.iter().flat_map(|s| s.points.iter()).chain(origins.iter());
        Aabb::from_points(points).map(|b| b.padded([pad; 3], [pad, pad, top_pad]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Camera rays per iteration (direct mode) or the pixel budget that sets
    /// the number of patches (upsample mode).
    pub rays_per_batch: usize,
    pub lidar_rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub loss: LossWeights,
    pub mode: RenderMode,
    pub seed: u64,
    pub exclude_key_frames: bool,
    /// Ray-resolution side length of the patches used in upsample mode.
    pub patch_size: usize,
    /// Fixed number of work chunks per batch; results do not depend on the
    /// number of threads.
    pub chunks: usize,
    pub adam: AdamConfig,
    pub model: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            rays_per_batch: 512,
            lidar_rays_per_batch: 128,
            samples_per_ray: 64,
            near: 0.2,
            far: 100.0,
            loss: LossWeights::default(),
            mode: RenderMode::Direct,
            seed: 42,
            exclude_key_frames: true,
            patch_size: 8,
            chunks: 8,
            adam: AdamConfig::default(),
            model: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::Config(m.to_string()));
        if self.samples_per_ray < 2 {
            return bad("samples_per_ray must be >= 2");
        }
        if !(self.near >= 0.0 && self.far > self.near) {
            return bad("need 0 <= near < far");
        }
        if [self.loss.rgb, self.loss.depth, self.loss.sky].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be >= 0");
        }
        if self.chunks == 0 || self.patch_size == 0 || self.mode.factor() == 0 {
            return bad("chunks, patch_size and upsample factor must be >= 1");
        }
        Ok(())
    }

    /// Settings for training rays at one iteration.
    pub fn settings(&self, iteration: usize) -> RenderSettings {
        RenderSettings {
            samples: self.samples_per_ray,
            near: self.near,
            far: self.far,
            jitter: true,
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ iteration as u64,
            early_stop: 0.0,
            mode: self.mode,
        }
    }

    /// Settings for evaluation renders: bin midpoints, early termination.
    pub fn eval_settings(&self) -> RenderSettings {
        RenderSettings {
            samples: self.samples_per_ray,
            near: self.near,
            far: self.far,
            jitter: false,
            seed: self.seed,
            early_stop: 1e-4,
            mode: self.mode,
        }
    }
}

/// One training-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub report: LossReport,
}

pub fn write_log_csv(rows: &[LossRow], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,rgb_loss,depth_loss,sky_loss,total")?;
    for r in rows {
        let p = &r.report;
        writeln!(f, "{},{},{},{},{}", r.iteration, p.rgb_loss, p.depth_loss, p.sky_loss, p.total)?;
    }
    f.flush()
}

/// A patch of rays at the reduced resolution of upsample mode.
pub(crate) struct Patch {
    pub view: usize,
    pub x0: usize,
    pub y0: usize,
    pub size_x: usize,
    pub size_y: usize,
}

fn lidar_targets(lidar: &[&LidarSweep], n: usize, rng: &mut ChaCha8Rng, far: f64) -> Vec<RayTarget> {
    let mut out = Vec::with_capacity(n);
    let usable: Vec<&&LidarSweep> = lidar.iter().filter(|s| !s.points.is_empty()).collect();
    if usable.is_empty() {
        return out;
    }
    for _ in 0..n {
        let s = usable[rng.gen_range(0..usable.len())];
        let p = s.points[rng.gen_range(0..s.points.len())];
        let o = nalgebra::Vector3::from(s.origin);
        let d = nalgebra::Vector3::from(p) - o;
        out.push(RayTarget {
            ray: Ray::new(o, d, 0.0, far),
            time: s.time,
            kind: RayTargetKind::Lidar { depth: d.norm() },
        });
    }
    out
}

fn camera_targets(views: &[&TrainingView], n: usize, rng: &mut ChaCha8Rng, near: f64, far: f64) -> Vec<RayTarget> {
    (0..n)
        .map(|_| {
            let v = views[rng.gen_range(0..views.len())];
            let (w, h) = (v.image.width, v.image.height);
            let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
            let rgb = v.image.pixel(x, y);
            RayTarget {
                ray: v.camera.unchecked_ray(x as f64 + 0.5, y as f64 + 0.5, &v.ego_pose, near, far),
                time: v.time,
                kind: RayTargetKind::Camera {
                    rgb,
                    sky: v.sky_mask.get(x, y),
                },
            }
        })
        .collect()
}

/// Direct-mode loss and gradient over a batch, split into fixed chunks.
fn direct_step(
    model: &SceneModel<f32>,
    targets: &[RayTarget],
    settings: &RenderSettings,
    config: &TrainConfig,
) -> ([f64; 3], Vec<f32>) {
    let norm = BatchNorm::of(targets);
    let chunk = targets.len().div_ceil(config.chunks).max(1);
    let params = model.params.values();
    let parts: Vec<([f64; 3], Vec<f32>)> = targets
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, part)| {
            let mut ws = RayWorkspace::new(model, settings.samples);
            let mut g = vec![0.0f32; params.len()];
            let s = accumulate_batch(
                model,
                params,
                part,
                (ci * chunk) as u64,
                settings,
                &config.loss,
                norm,
                Some(&mut g),
                &mut ws,
            );
            (s, g)
        })
        .collect();
    reduce(parts, params.len())
}

fn reduce(parts: Vec<([f64; 3], Vec<f32>)>, n: usize) -> ([f64; 3], Vec<f32>) {
    let mut sums = [0.0; 3];
    let mut grads = vec![0.0f32; n];
    for (s, g) in parts {
        for k in 0..3 {
            sums[k] += s[k];
        }
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    (sums, grads)
}

/// Upsample-mode loss and gradient of one patch. Rays are traced twice: once
/// to build the feature image, then again to backpropagate the upsampler's
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn patch_step<R: Real>(
    model: &SceneModel<R>,
    params: &[R],
    view: &TrainingView,
    patch: &Patch,
    first_index: u64,
    settings: &RenderSettings,
    weights: &LossWeights,
    inv_pixels: f64,
    inv_rays: f64,
    grads: &mut [R],
    ws: &mut RayWorkspace<R>,
) -> [f64; 3] {
    let factor = settings.mode.factor();
    let nf = model.config.appearance_dim;
    let low = Camera {
        intrinsics: view.camera.intrinsics.downscaled(factor as u32),
        ..view.camera.clone()
    };
    let frame = model.actor_frame(view.time);
    let (px, py) = (patch.size_x, patch.size_y);
    let ray_at = |j: usize| {
        let (x, y) = (patch.x0 + j % px, patch.y0 + j / px);
        low.unchecked_ray(x as f64 + 0.5, y as f64 + 0.5, &view.ego_pose, settings.near, settings.far)
    };
    let mut feats = Vec::with_capacity(px * py * nf);
    let mut opacity = Vec::with_capacity(px * py);
    for j in 0..px * py {
        trace_ray(model, params, &ray_at(j), &frame, settings, first_index + j as u64, ws);
        feats.extend_from_slice(&ws.out.feature);
        opacity.push(ws.out.opacity);
    }
    let up = &model.layout.upsampler;
    let tape = up.forward(params, &upsampler_input(&feats, &opacity, nf), py, px, factor);
    let (ww, hh) = (px * factor, py * factor);
    let mut sums = [0.0; 3];
    let mut d_rgb = vec![R::zero(); ww * hh * 3];
    for y in 0..hh {
        for x in 0..ww {
            let gt = view.image.pixel(patch.x0 * factor + x, patch.y0 * factor + y);
            for c in 0..3 {
                let i = (y * ww + x) * 3 + c;
                let diff = tape.rgb[i].f64() - gt[c] as f64;
                sums[0] += diff * diff * inv_pixels / 3.0;
                d_rgb[i] = R::of(weights.rgb * 2.0 * diff * inv_pixels / 3.0);
            }
        }
    }
    let d_in = up.backward(params, &tape, &d_rgb, grads);
    for j in 0..px * py {
        let (x, y) = (patch.x0 + j % px, patch.y0 + j / px);
        // fraction of sky pixels in this ray's block is the soft target
        let mut sky = 0usize;
        for dy in 0..factor {
            for dx in 0..factor {
                sky += view.sky_mask.get(x * factor + dx, y * factor + dy) as usize;
            }
        }
        let target = 1.0 - sky as f64 / (factor * factor) as f64;
        let (l, g) = bce(opacity[j].f64(), target);
        sums[2] += l * inv_rays;
        trace_ray(model, params, &ray_at(j), &frame, settings, first_index + j as u64, ws);
        let d = &d_in[j * (nf + 1)..(j + 1) * (nf + 1)];
        let d_opacity = d[nf] + R::of(weights.sky * g * inv_rays);
        backprop_ray(model, params, ws, &d[..nf], R::zero(), d_opacity, grads);
    }
    sums
}

fn upsample_step(
    model: &SceneModel<f32>,
    views: &[&TrainingView],
    lidar: &[RayTarget],
    rng: &mut ChaCha8Rng,
    settings: &RenderSettings,
    config: &TrainConfig,
) -> ([f64; 3], Vec<f32>) {
    let factor = settings.mode.factor();
    let p = config.patch_size;
    let n_patches = (config.rays_per_batch / (p * p * factor * factor)).max(1);
    let patches: Vec<Patch> = (0..n_patches)
        .map(|_| {
            let vi = rng.gen_range(0..views.len());
            let (w, h) = (views[vi].image.width / factor, views[vi].image.height / factor);
            let (sx, sy) = (p.min(w), p.min(h));
            Patch {
                view: vi,
                x0: rng.gen_range(0..=w - sx),
                y0: rng.gen_range(0..=h - sy),
                size_x: sx,
                size_y: sy,
            }
        })
        .collect();
    let pixels: usize = patches.iter().map(|q| q.size_x * q.size_y * factor * factor).sum();
    let rays: usize = patches.iter().map(|q| q.size_x * q.size_y).sum();
    let params = model.params.values();
    let base = (rays + lidar.len()) as u64;
    let mut parts: Vec<([f64; 3], Vec<f32>)> = patches
        .par_iter()
        .enumerate()
        .map(|(pi, patch)| {
            let mut ws = RayWorkspace::new(model, settings.samples);
            let mut g = vec![0.0f32; params.len()];
            let s = patch_step(
                model,
                params,
                views[patch.view],
                patch,
                base + (pi * p * p) as u64,
                settings,
                &config.loss,
                1.0 / pixels as f64,
                1.0 / rays as f64,
                &mut g,
                &mut ws,
            );
            (s, g)
        })
        .collect();
    if !lidar.is_empty() {
        let mut ws = RayWorkspace::new(model, settings.samples);
        let mut g = vec![0.0f32; params.len()];
        let norm = BatchNorm {
            camera_rays: 0,
            lidar_rays: lidar.len(),
        };
        let s = accumulate_batch(model, params, lidar, 0, settings, &config.loss, norm, Some(&mut g), &mut ws);
        parts.push((s, g));
    }
    reduce(parts, params.len())
}

/// Trains a scene model from scratch. Returns the model and one log row per
/// iteration (losses measured before that iteration's update).
pub fn train_scene(scene: &TrainingScene, config: &TrainConfig) -> Result<(SceneModel<f32>, Vec<LossRow>), RenderError> {
    config.validate()?;
    let keep = |key: bool| !(config.exclude_key_frames && key);
    let views: Vec<&TrainingView> = scene.views.iter().filter(|v| keep(v.is_key_frame)).collect();
    let lidar: Vec<&LidarSweep> = scene.lidar.iter().filter(|s| keep(s.is_key_frame)).collect();
    if views.is_empty() {
        return Err(RenderError::EmptyScene);
    }
    let factor = config.mode.factor();
    for v in &views {
        if v.image.width % factor != 0 || v.image.height % factor != 0 {
            return Err(RenderError::Indivisible {
                width: v.image.width as u32,
                height: v.image.height as u32,
                factor,
            });
        }
        if (v.sky_mask.width, v.sky_mask.height) != (v.image.width, v.image.height) {
            return Err(RenderError::Shape(format!("sky mask of {} frame {}", v.camera.channel, v.frame)));
        }
    }
    let mut model = SceneModel::<f32>::new(
        config.model,
        scene.tracks.clone(),
        scene.scene_aabb,
        scene.time_range,
        config.seed,
    )?;
    let mut adam = AdamState::new(model.params.len(), config.adam);
    let mut grads = model.params.zeros_like();
    let mut log = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(it as u64 + 1);
        let settings = config.settings(it);
        let (sums, g) = match config.mode {
            RenderMode::Direct => {
                let mut targets = camera_targets(&views, config.rays_per_batch, &mut rng, config.near, config.far);
                targets.extend(lidar_targets(&lidar, config.lidar_rays_per_batch, &mut rng, config.far));
                direct_step(&model, &targets, &settings, config)
            }
            RenderMode::Upsample { .. } => {
                let lt = lidar_targets(&lidar, config.lidar_rays_per_batch, &mut rng, config.far);
                upsample_step(&model, &views, &lt, &mut rng, &settings, config)
            }
        };
        let report = LossReport::new(sums[0], sums[1], sums[2], &config.loss);
        if !report.total.is_finite() {
            return Err(RenderError::NonFiniteLoss(it));
        }
        grads.set_values(g)?;
        adam_step(&mut model.params, &grads, &mut adam)?;
        log.push(LossRow { iteration: it, report });
    }
    Ok((model, log))
}
