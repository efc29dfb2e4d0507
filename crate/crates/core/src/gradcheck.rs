//! Finite-difference gradient gates for every differentiable operation, run
//! at 64-bit on frozen fixtures.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::category::Category;
use crate::fields::hashgrid::HashGridConfig;
use crate::fields::{Aabb, FieldConfig, SampleQuery, SceneModel};
use crate::geometry::{ActorTrack, Camera, CameraIntrinsics, Pose, Ray};
use crate::image::{Mask, RgbImage};
use crate::optimizer::{grad_check, GradCheckReport, Objective, OptimError, ParamVector};
use crate::renderer::train::{patch_step, Patch, TrainingView};
use crate::renderer::{
    batch_loss, geometry_to_alpha, geometry_to_alpha_grad, LossWeights, RayTarget, RayTargetKind, RayWorkspace,
    RenderMode, RenderSettings,
};

/// Coordinates compared per parameter group.
pub const SAMPLES: usize = 64;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Small grids and a narrow MLP so every check runs in well under a second.
pub fn small_config() -> FieldConfig {
    let grid = |levels, table_size, base, dims| HashGridConfig {
        levels,
        table_size,
        features_per_level: 2,
        base_resolution: base,
        growth_factor: 2.0,
        input_dims: dims,
    };
    FieldConfig {
        env_grid: grid(4, 1 << 10, 4, 3),
        actor_static_grid: grid(2, 1 << 8, 2, 3),
        actor_dynamic_grid: grid(2, 1 << 8, 2, 4),
        hidden_width: 16,
        ..FieldConfig::default()
    }
}

pub fn test_track() -> ActorTrack {
    ActorTrack {
        actor_id: "car-0".into(),
        class_name: Category::Car,
        size: [4.0, 2.0, 1.6],
        keyframes: vec![
            (0.0, Pose::from_yaw(0.0, [2.0, 1.0, 0.8])),
            (4.0, Pose::from_yaw(0.3, [8.0, 2.0, 0.8])),
        ],
    }
}

/// A small model with parameters spread out so every path carries signal.
pub fn test_model(seed: u64) -> SceneModel<f64> {
    let aabb = Aabb::new([-10.0, -10.0, -1.0], [20.0, 10.0, 9.0]).expect("valid bounds");
    let mut m = SceneModel::<f64>::new(small_config(), vec![test_track()], aabb, (0.0, 4.0), seed)
        .expect("fixture model builds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for name in ["env_grid", "actor_static_grid", "actor_dynamic_grid", "actor_embeddings"] {
        for v in m.params.slice_mut(name).expect("segment exists") {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    separate_hidden_units(&mut m.params, &mut rng);
    m
}

/// Shrinks hidden-layer weights and pushes hidden biases to +/-1 so no ReLU
/// sits within a finite-difference step of its kink, while both the active
/// and the inactive branch stay exercised. Output biases get random offsets.
pub fn separate_hidden_units(params: &mut ParamVector<f64>, rng: &mut ChaCha8Rng) {
    let segs = params.segments().to_vec();
    for seg in &segs {
        let Some(prefix) = ["ratio_mlp.", "decoder_mlp.", "sky_mlp."].iter().find(|p| seg.name.starts_with(*p)) else {
            if seg.name.ends_with(".bias") {
                for v in &mut params.values_mut()[seg.range()] {
                    *v += rng.gen_range(-0.2..0.2);
                }
            }
            continue;
        };
        let last = segs.iter().filter(|s| s.name.starts_with(prefix)).count() / 2 - 1;
        let layer: usize = seg.name[prefix.len()..].split('.').next().and_then(|l| l.parse().ok()).expect("layer index");
        let values = &mut params.values_mut()[seg.range()];
        if layer == last {
            if seg.name.ends_with(".bias") {
                values.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
            }
        } else if seg.name.ends_with(".bias") {
            values.iter_mut().for_each(|v| *v = if rng.gen::<bool>() { 1.0 } else { -1.0 });
        } else {
            values.iter_mut().for_each(|v| *v *= 0.3);
        }
    }
}

pub fn random_queries(rng: &mut ChaCha8Rng, n: usize, actor: bool) -> Vec<SampleQuery> {
    (0..n)
        .map(|_| {
            let x = [rng.gen(), rng.gen(), rng.gen()];
            if actor {
                SampleQuery::Actor { actor: 0, x, t: rng.gen() }
            } else {
                SampleQuery::Env { x }
            }
        })
        .collect()
}

pub fn random_directions(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            [v.x, v.y, v.z]
        })
        .collect()
}

/// Nonlinear readout of field samples and sky features.
pub struct FieldObjective {
    pub model: SceneModel<f64>,
    pub queries: Vec<SampleQuery>,
    pub dirs: Vec<[f64; 3]>,
    pub coeffs: Vec<f64>,
}

impl FieldObjective {
    pub fn new(queries: Vec<SampleQuery>, dirs: Vec<[f64; 3]>) -> Self {
        let model = test_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let coeffs = (0..model.config.appearance_dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Self {
            model,
            queries,
            dirs,
            coeffs,
        }
    }

    fn run(&self, p: &[f64], mut grads: Option<&mut Vec<f64>>) -> f64 {
        let m = &self.model;
        let mut tape = m.new_tape();
        let mut sky = m.new_sky_tape();
        let mut scratch = m.new_scratch();
        let mut total = 0.0;
        for q in &self.queries {
            let s = m.forward_sample(p, *q, &mut tape);
            total += s.tanh();
            let f = tape.f().to_vec();
            total += f.iter().zip(&self.coeffs).map(|(v, c)| (c * v).sin()).sum::<f64>();
            if let Some(g) = grads.as_deref_mut() {
                let d_f: Vec<f64> = f.iter().zip(&self.coeffs).map(|(v, c)| c * (c * v).cos()).collect();
                m.backward_sample(p, &tape, 1.0 - s.tanh().powi(2), &d_f, g, &mut scratch);
            }
        }
        for d in &self.dirs {
            m.sky_forward(p, d, &mut sky);
            let f = sky.feature(m).to_vec();
            total += f.iter().zip(&self.coeffs).map(|(v, c)| (c * v).sin()).sum::<f64>();
            if let Some(g) = grads.as_deref_mut() {
                let d_f: Vec<f64> = f.iter().zip(&self.coeffs).map(|(v, c)| c * (c * v).cos()).collect();
                m.sky_backward(p, &sky, &d_f, g, &mut scratch);
            }
        }
        total
    }
}

impl Objective for FieldObjective {
    fn value(&self, p: &[f64]) -> f64 {
        self.run(p, None)
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        self.run(p, Some(&mut g));
        g
    }
}

/// Weighted sum of opacities over a vector of raw densities and fixed
/// interval lengths.
pub struct AlphaObjective {
    pub params: ParamVector<f64>,
    pub deltas: Vec<f64>,
    pub coeffs: Vec<f64>,
}

impl AlphaObjective {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::new();
        params
            .push("geometry", (0..n).map(|_| rng.gen_range(-4.0..3.0)).collect())
            .expect("fresh segment");
        Self {
            params,
            deltas: (0..n).map(|_| rng.gen_range(0.01..1.0)).collect(),
            coeffs: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        }
    }
}

impl Objective for AlphaObjective {
    fn value(&self, p: &[f64]) -> f64 {
        p.iter()
            .zip(&self.deltas)
            .zip(&self.coeffs)
            .map(|((s, d), c)| c * geometry_to_alpha(*s, *d))
            .sum()
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(&self.deltas)
            .zip(&self.coeffs)
            .map(|((s, d), c)| c * geometry_to_alpha_grad(*s, *d))
            .collect()
    }
}

fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
    Ray::new(Vector3::from(o), Vector3::from(d), 0.2, 40.0)
}

/// Two camera rays and two lidar rays, one of each through the actor box.
pub fn frozen_batch() -> Vec<RayTarget> {
    vec![
        RayTarget {
            ray: ray([-5.0, 1.0, 1.0], [1.0, 0.0, -0.02]),
            time: 0.5,
            kind: RayTargetKind::Camera {
                rgb: [0.8, 0.2, 0.3],
                sky: false,
            },
        },
        RayTarget {
            ray: ray([-5.0, -2.0, 1.5], [0.2, -1.0, 0.4]),
            time: 1.5,
            kind: RayTargetKind::Camera {
                rgb: [0.4, 0.6, 0.9],
                sky: true,
            },
        },
        RayTarget {
            ray: ray([-3.0, 1.5, 1.2], [1.0, -0.1, -0.05]),
            time: 0.2,
            kind: RayTargetKind::Lidar { depth: 4.0 },
        },
        RayTarget {
            ray: ray([0.0, 0.0, 2.0], [0.3, 0.5, -0.4]),
            time: 2.5,
            kind: RayTargetKind::Lidar { depth: 3.0 },
        },
    ]
}

/// Parameter groups of the full model.
pub const GRADIENT_GROUPS: [&str; 10] = [
    "env_grid",
    "actor_static_grid",
    "actor_dynamic_grid",
    "actor_embeddings",
    "env_proj",
    "actor_proj",
    "ratio_mlp",
    "decoder_mlp",
    "sky_mlp",
    "rgb_head",
];

/// Total render loss of a ray batch.
pub struct BatchObjective {
    pub model: SceneModel<f64>,
    pub batch: Vec<RayTarget>,
    pub settings: RenderSettings,
}

impl BatchObjective {
    pub fn frozen() -> Self {
        Self {
            model: test_model(4),
            batch: frozen_batch(),
            settings: RenderSettings {
                samples: 16,
                jitter: true,
                seed: 3,
                early_stop: 0.0,
                ..RenderSettings::default()
            },
        }
    }
}

impl Objective for BatchObjective {
    fn value(&self, p: &[f64]) -> f64 {
        batch_loss(&self.model, p, &self.batch, &self.settings, &LossWeights::default(), None).total
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        batch_loss(&self.model, p, &self.batch, &self.settings, &LossWeights::default(), Some(&mut g));
        g
    }
}

/// An 8x8 random image seen from a forward-looking camera, top rows sky.
pub fn tiny_view() -> TrainingView {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let intrinsics = CameraIntrinsics {
        fx: 6.0,
        fy: 6.0,
        cx: 4.0,
        cy: 4.0,
        width: 8,
        height: 8,
    };
    let mut image = RgbImage::new(8, 8);
    image.data.iter_mut().for_each(|v| *v = rng.gen());
    let mut sky_mask = Mask::new(8, 8);
    for x in 0..8 {
        for y in 0..3 {
            sky_mask.set(x, y, true);
        }
    }
    TrainingView {
        frame: 0,
        is_key_frame: false,
        time: 0.5,
        camera: Camera {
            channel: "CAM_FRONT".into(),
            intrinsics,
            pose_in_ego: Pose::from_wxyz([0.5, -0.5, 0.5, -0.5], [0.0, 0.0, 1.0]).expect("unit quaternion"),
        },
        ego_pose: Pose::from_translation([-5.0, 1.0, 0.0]),
        image,
        sky_mask,
    }
}

/// Loss of one 2x3 ray patch through the convolutional upsampler.
pub struct PatchObjective {
    pub model: SceneModel<f64>,
    pub view: TrainingView,
    pub settings: RenderSettings,
}

impl PatchObjective {
    pub fn frozen() -> Self {
        let mut model = test_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let segs: Vec<_> = model.params.segments().iter().filter(|s| s.name.starts_with("upsampler")).cloned().collect();
        for s in segs {
            for v in &mut model.params.values_mut()[s.range()] {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        Self {
            model,
            view: tiny_view(),
            settings: RenderSettings {
                samples: 8,
                jitter: true,
                seed: 4,
                early_stop: 0.0,
                mode: RenderMode::Upsample { factor: 2 },
                ..RenderSettings::default()
            },
        }
    }

    fn run(&self, p: &[f64], g: &mut [f64]) -> f64 {
        let patch = Patch {
            view: 0,
            x0: 1,
            y0: 0,
            size_x: 2,
            size_y: 3,
        };
        let mut ws = RayWorkspace::new(&self.model, self.settings.samples);
        let w = LossWeights::default();
        let s = patch_step(&self.model, p, &self.view, &patch, 0, &self.settings, &w, 1.0 / 24.0, 1.0 / 6.0, g, &mut ws);
        w.rgb * s[0] + w.depth * s[1] + w.sky * s[2]
    }
}

impl Objective for PatchObjective {
    fn value(&self, p: &[f64]) -> f64 {
        self.run(p, &mut vec![0.0; p.len()])
    }
    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        self.run(p, &mut g);
        g
    }
}

/// Outcome of one operation's check on one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub operation: &'static str,
    pub group: &'static str,
    pub report: GradCheckReport,
}

impl GateOutcome {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < TOLERANCE
    }
}

fn gate(
    out: &mut Vec<GateOutcome>,
    operation: &'static str,
    objective: &dyn Objective,
    params: &ParamVector<f64>,
    eps: f64,
    seed: u64,
    groups: &[&'static str],
) -> Result<(), OptimError> {
    for &group in groups {
        let report = grad_check(objective, params, eps, SAMPLES, seed, Some(group))?;
        out.push(GateOutcome {
            operation,
            group,
            report,
        });
    }
    Ok(())
}

/// Runs every gradient gate with frozen seeds.
pub fn run_all() -> Result<Vec<GateOutcome>, OptimError> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let env = FieldObjective::new(random_queries(&mut rng, 64, false), vec![]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let actor = FieldObjective::new(random_queries(&mut rng, 64, true), vec![]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sky = FieldObjective::new(vec![], random_directions(&mut rng, 32));

    gate(&mut out, "hash_encode", &env, &env.model.params, 1e-3, 11, &["env_grid"])?;
    gate(
        &mut out,
        "hash_encode",
        &actor,
        &actor.model.params,
        1e-3,
        11,
        &["actor_static_grid", "actor_dynamic_grid"],
    )?;
    gate(
        &mut out,
        "actor_blend",
        &actor,
        &actor.model.params,
        1e-3,
        11,
        &["ratio_mlp", "actor_embeddings", "actor_proj"],
    )?;
    gate(&mut out, "decoder", &env, &env.model.params, 1e-3, 11, &["env_proj", "decoder_mlp"])?;
    gate(&mut out, "sky", &sky, &sky.model.params, 1e-3, 11, &["sky_mlp"])?;
    let alpha = AlphaObjective::new(SAMPLES, 13);
    gate(&mut out, "geometry_to_alpha", &alpha, &alpha.params, 1e-5, 13, &["geometry"])?;
    let full = BatchObjective::frozen();
    gate(&mut out, "full_render_loss", &full, &full.model.params, 1e-3, 21, &GRADIENT_GROUPS)?;
    let patch = PatchObjective::frozen();
    gate(
        &mut out,
        "upsampler_loss",
        &patch,
        &patch.model.params,
        1e-3,
        8,
        &["upsampler", "decoder_mlp", "env_grid", "sky_mlp"],
    )?;
    Ok(out)
}
