//! Procedural street-canyon worlds: an exact ray-casting renderer, a lidar
//! sampler and the dual-rig dataset exporter.
//!
//! A world is a bounded ground plane (checker albedo), two rows of buildings
//! and two end walls enclosing a straight street, a few sidewalk props,
//! moving actors with tracked boxes, and an analytic sky. Everything is a
//! function of the seed and the config.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::dataset::{self, CalibratedSensorRecord, CategoryRecord, DatasetError, DatasetTables};
use crate::geometry::{shift_rig, ActorTrack, Camera, GeometryError, Pose, Rig, RigShift};
use crate::image::{Mask, RgbImage};

pub const SUV_SPLIT: &str = "sim-SUV";
pub const SUB_SPLIT: &str = "sim-SUB";
/// Microsecond timestamp of t = 0.
pub const TIME_ORIGIN_US: i64 = 1_700_000_000_000_000;
/// Ego body box (length, width, height) centered `EGO_CENTER` ahead of the
/// ego origin.
pub const EGO_SIZE: [f64; 3] = [4.8, 1.9, 1.7];
pub const EGO_CENTER: [f64; 3] = [1.4, 0.0, 0.85];

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("could not place {what} after {attempts} attempts")]
    Infeasible { what: String, attempts: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Scanning lidar: `beams` elevation rows times `azimuth_steps` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarPattern {
    pub beams: usize,
    pub azimuth_steps: usize,
    /// Lowest and highest beam elevation in degrees; one beam uses the lowest.
    pub elevation_deg: [f64; 2],
    pub max_range: f64,
    /// Sensor pose in the ego frame (x forward, y left, z up).
    pub mount: Pose,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self {
            beams: 16,
            azimuth_steps: 120,
            elevation_deg: [-30.0, 10.0],
            max_range: 60.0,
            mount: Pose::from_translation([0.0, 0.0, 1.9]),
        }
    }
}

impl LidarPattern {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.beams == 0 || self.azimuth_steps == 0 {
            return Err(WorldError::Config("lidar beams and azimuth_steps must be >= 1".into()));
        }
        if !(self.max_range > 0.0) || self.elevation_deg.iter().any(|e| !e.is_finite()) {
            return Err(WorldError::Config("lidar range must be > 0 and elevations finite".into()));
        }
        Ok(())
    }

    /// Ray direction of one beam and step in the sensor frame.
    pub fn direction(&self, beam: usize, step: usize) -> Vector3<f64> {
        let [lo, hi] = self.elevation_deg;
        let el = if self.beams == 1 {
            lo
        } else {
            lo + (hi - lo) * beam as f64 / (self.beams - 1) as f64
        }
        .to_radians();
        let az = std::f64::consts::TAU * step as f64 / self.azimuth_steps as f64;
        Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub frames: usize,
    pub frame_rate: f64,
    pub ego_speed: f64,
    /// Street and buildings span x in this range (meters).
    pub x_range: [f64; 2],
    /// Buildings reach out to |y| = half_extent.
    pub half_extent: f64,
    pub street_half_width: f64,
    pub building_length: [f64; 2],
    pub building_height: [f64; 2],
    pub props: usize,
    /// Every listed class gets at least one actor.
    pub actor_classes: Vec<Category>,
    pub actor_count: usize,
    pub checker_size: f64,
    pub ambient: f64,
    pub max_attempts: usize,
    /// Frames with `index % holdout_every == holdout_offset` are held out.
    pub holdout_every: usize,
    pub holdout_offset: usize,
    pub lidar: LidarPattern,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            frame_rate: 2.0,
            ego_speed: 1.5,
            x_range: [-20.0, 45.0],
            half_extent: 14.0,
            street_half_width: 7.0,
            building_length: [6.0, 14.0],
            building_height: [5.0, 12.0],
            props: 3,
            actor_classes: vec![Category::Car, Category::Bicycle],
            actor_count: 3,
            checker_size: 2.0,
            ambient: 0.4,
            max_attempts: 200,
            holdout_every: 10,
            holdout_offset: 5,
            lidar: LidarPattern::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::Config(m.to_string()));
        if self.frames == 0 || !(self.frame_rate > 0.0) {
            return bad("frames must be >= 1 and frame_rate > 0");
        }
        if !(self.x_range[1] - self.x_range[0] > 10.0) {
            return bad("x_range must span more than 10 m");
        }
        if !(self.street_half_width > 3.0 && self.half_extent > self.street_half_width + 1.0) {
            return bad("need street_half_width > 3 and half_extent > street_half_width + 1");
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[1] >= r[0];
        if !ordered(self.building_length) || !ordered(self.building_height) {
            return bad("building ranges must be positive and ordered");
        }
        if self.actor_count < self.actor_classes.len() {
            return bad("actor_count must cover every configured class");
        }
        if !(self.checker_size > 0.0) || !(0.0..=1.0).contains(&self.ambient) || !(self.ego_speed >= 0.0) {
            return bad("checker_size > 0, ambient in [0, 1], ego_speed >= 0");
        }
        if self.holdout_every == 0 || self.max_attempts == 0 {
            return bad("holdout_every and max_attempts must be >= 1");
        }
        let travel = self.ego_speed * self.duration();
        if self.x_range[0] + 6.0 > 0.0 || travel + EGO_SIZE[0] + 6.0 > self.x_range[1] {
            return bad("the ego path (starting at x = 0) must stay 6 m inside x_range");
        }
        self.lidar.validate()
    }

    /// Time of the last frame.
    pub fn duration(&self) -> f64 {
        (self.frames.saturating_sub(1)) as f64 / self.frame_rate
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate
    }

    pub fn is_held_out(&self, frame: usize) -> bool {
        frame % self.holdout_every == self.holdout_offset
    }
}

/// An oriented box with one albedo per face (+x, -x, +y, -y, +z, -z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticBox {
    pub pose: Pose,
    pub size: [f64; 3],
    pub face_albedo: [[f64; 3]; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldActor {
    pub track: ActorTrack,
    pub albedo: [f64; 3],
}

/// Vertical gradient plus a soft sun glow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sky {
    pub horizon: [f64; 3],
    pub zenith: [f64; 3],
    pub sun_color: [f64; 3],
    /// Angular radius (radians) of the glow.
    pub sun_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldScene {
    pub seed: u64,
    pub config: WorldConfig,
    /// Ground rectangle [x0, y0, x1, y1] on z = 0.
    pub ground_extent: [f64; 4],
    pub ground_albedo: [[f64; 3]; 2],
    pub statics: Vec<StaticBox>,
    pub actors: Vec<WorldActor>,
    pub sky: Sky,
    /// Unit vector toward the sun.
    pub sun_direction: [f64; 3],
    /// (timestamp seconds, ego pose) per frame.
    pub ego: Vec<(f64, Pose)>,
}

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Static(usize),
    Actor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub normal: Vector3<f64>,
    pub albedo: [f64; 3],
    pub surface: Surface,
}

/// Entry distance and face index of a ray against a box, if the ray starts
/// outside and meets it within `max_t`.
fn ray_box(pose: &Pose, size: &[f64; 3], o: &Vector3<f64>, d: &Vector3<f64>, max_t: f64) -> Option<(f64, usize)> {
    let inv = pose.rotation.inverse();
    let p = inv * (o - pose.translation);
    let v = inv * d;
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut face = 0;
    for i in 0..3 {
        let h = 0.5 * size[i];
        if v[i] == 0.0 {
            if p[i].abs() > h {
                return None;
            }
            continue;
        }
        let a = (-h - p[i]) / v[i];
        let b = (h - p[i]) / v[i];
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t0 {
            t0 = near;
            // entering through +axis face when moving in -axis direction
            face = 2 * i + usize::from(v[i] > 0.0);
        }
        t1 = t1.min(far);
    }
    (t0 <= t1 && t0 > 1e-9 && t0 <= max_t).then_some((t0, face))
}

fn face_normal(pose: &Pose, face: usize) -> Vector3<f64> {
    let mut n = Vector3::zeros();
    n[face / 2] = if face % 2 == 0 { 1.0 } else { -1.0 };
    pose.rotation * n
}

fn mix(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    std::array::from_fn(|i| a[i] * (1.0 - w) + b[i] * w)
}

impl WorldScene {
    pub fn ego_pose(&self, frame: usize) -> Pose {
        self.ego[frame].1
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        self.ego[frame].0
    }

    pub fn tracks(&self) -> Vec<ActorTrack> {
        self.actors.iter().map(|a| a.track.clone()).collect()
    }

    fn ground_albedo_at(&self, x: f64, y: f64) -> [f64; 3] {
        let c = self.config.checker_size;
        let parity = ((x / c).floor() as i64 + (y / c).floor() as i64).rem_euclid(2);
        self.ground_albedo[parity as usize]
    }

    /// Nearest surface along a unit-direction ray within `max_t`.
    pub fn cast(&self, t: f64, o: &Vector3<f64>, d: &Vector3<f64>, max_t: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut limit = max_t;
        if d.z < 0.0 && o.z > 0.0 {
            let s = -o.z / d.z;
            if s <= limit {
                let p = o + d * s;
                let [x0, y0, x1, y1] = self.ground_extent;
                if p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1 {
                    limit = s;
                    best = Some(Hit {
                        distance: s,
                        normal: Vector3::z(),
                        albedo: self.ground_albedo_at(p.x, p.y),
                        surface: Surface::Ground,
                    });
                }
            }
        }
        for (i, b) in self.statics.iter().enumerate() {
            if let Some((s, face)) = ray_box(&b.pose, &b.size, o, d, limit) {
                limit = s;
                best = Some(Hit {
                    distance: s,
                    normal: face_normal(&b.pose, face),
                    albedo: b.face_albedo[face],
                    surface: Surface::Static(i),
                });
            }
        }
        for (i, a) in self.actors.iter().enumerate() {
            let pose = a.track.pose_at(t);
            if let Some((s, face)) = ray_box(&pose, &a.track.size, o, d, limit) {
                limit = s;
                // slightly darker roof and underside so orientation is visible
                let shade = if face >= 4 { 0.8 } else { 1.0 };
                best = Some(Hit {
                    distance: s,
                    normal: face_normal(&pose, face),
                    albedo: a.albedo.map(|c| c * shade),
                    surface: Surface::Actor(i),
                });
            }
        }
        best
    }

    /// Lambertian shading with a fixed sun and ambient term.
    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let sun = Vector3::from(self.sun_direction);
        let k = self.config.ambient + (1.0 - self.config.ambient) * hit.normal.dot(&sun).max(0.0);
        hit.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    pub fn sky_color(&self, d: &Vector3<f64>) -> [f64; 3] {
        let s = &self.sky;
        let up = d.z.clamp(0.0, 1.0).sqrt();
        let base = mix(s.horizon, s.zenith, up);
        let cos = d.dot(&Vector3::from(self.sun_direction)).clamp(-1.0, 1.0);
        let angle = cos.acos();
        let glow = (-(angle / s.sun_radius).powi(2)).exp();
        mix(base, s.sun_color, glow).map(|c| c.clamp(0.0, 1.0))
    }

    /// Fraction of a 3x3x3 grid of interior box points of actor `i` whose
    /// sight line from `origin` reaches the actor first.
    pub fn visibility(&self, i: usize, t: f64, origin: &Vector3<f64>) -> f64 {
        let a = &self.actors[i];
        let pose = a.track.pose_at(t);
        let mut seen = 0;
        for gx in [-0.8, 0.0, 0.8] {
            for gy in [-0.8, 0.0, 0.8] {
                for gz in [-0.8, 0.0, 0.8] {
                    let local = Vector3::new(
                        gx * 0.5 * a.track.size[0],
                        gy * 0.5 * a.track.size[1],
                        gz * 0.5 * a.track.size[2],
                    );
                    let q = pose.transform_point(&local);
                    let d = q - origin;
                    let dist = d.norm();
                    let hit = self.cast(t, origin, &(d / dist), dist);
                    if matches!(hit, Some(Hit { surface: Surface::Actor(j), .. }) if j == i) {
                        seen += 1;
                    }
                }
            }
        }
        seen as f64 / 27.0
    }
}

/// Exact render of one camera: RGB, hit distance along each pixel ray
/// (infinite on sky) and the sky mask.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFrame {
    pub rgb: RgbImage,
    pub depth: Vec<f64>,
    pub sky: Mask,
}

pub fn oracle_render(world: &WorldScene, camera: &Camera, ego_pose: &Pose, t: f64) -> OracleFrame {
    let (w, h) = (camera.intrinsics.width as usize, camera.intrinsics.height as usize);
    let rows: Vec<(Vec<f32>, Vec<f64>, Vec<u8>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(w * 3);
            let mut depth = Vec::with_capacity(w);
            let mut sky = Vec::with_capacity(w);
            for x in 0..w {
                let ray = camera.unchecked_ray(x as f64 + 0.5, y as f64 + 0.5, ego_pose, 0.0, f64::INFINITY);
                match world.cast(t, &ray.origin, &ray.direction, f64::INFINITY) {
                    Some(hit) => {
                        rgb.extend(world.shade(&hit).map(|c| c as f32));
                        depth.push(hit.distance);
                        sky.push(0);
                    }
                    None => {
                        rgb.extend(world.sky_color(&ray.direction).map(|c| c as f32));
                        depth.push(f64::INFINITY);
                        sky.push(1);
                    }
                }
            }
            (rgb, depth, sky)
        })
        .collect();
    let mut out = OracleFrame {
        rgb: RgbImage::new(w, h),
        depth: Vec::with_capacity(w * h),
        sky: Mask::new(w, h),
    };
    out.rgb.data.clear();
    out.sky.data.clear();
    for (r, d, s) in rows {
        out.rgb.data.extend(r);
        out.depth.extend(d);
        out.sky.data.extend(s);
    }
    out
}

/// One lidar return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    /// World-frame hit position.
    pub point: [f64; 3],
    pub beam: usize,
    pub step: usize,
    pub range: f64,
}

/// World-frame lidar origin for an ego pose.
pub fn lidar_origin(ego_pose: &Pose, pattern: &LidarPattern) -> Vector3<f64> {
    ego_pose.compose(&pattern.mount).translation
}

/// Casts every beam of the pattern; returns the hits within range.
pub fn sample_lidar(world: &WorldScene, ego_pose: &Pose, t: f64, pattern: &LidarPattern) -> Vec<LidarPoint> {
    let sensor = ego_pose.compose(&pattern.mount);
    let mut out = Vec::new();
    for beam in 0..pattern.beams {
        for step in 0..pattern.azimuth_steps {
            let d = sensor.transform_vector(&pattern.direction(beam, step)).normalize();
            if let Some(hit) = world.cast(t, &sensor.translation, &d, pattern.max_range) {
                let p = sensor.translation + d * hit.distance;
                out.push(LidarPoint {
                    point: [p.x, p.y, p.z],
                    beam,
                    step,
                    range: hit.distance,
                });
            }
        }
    }
    out
}

/// Separating-axis overlap test of two yawed rectangles, each inflated by
/// `margin` on every side.
fn rects_overlap(a: ([f64; 2], f64, [f64; 2]), b: ([f64; 2], f64, [f64; 2]), margin: f64) -> bool {
    let axes = |yaw: f64| [[yaw.cos(), yaw.sin()], [-yaw.sin(), yaw.cos()]];
    let (aa, ba) = (axes(a.1), axes(b.1));
    let d = [b.0[0] - a.0[0], b.0[1] - a.0[1]];
    let dot = |u: [f64; 2], v: [f64; 2]| u[0] * v[0] + u[1] * v[1];
    for axis in aa.iter().chain(ba.iter()) {
        let ra = (a.2[0] + margin) * dot(aa[0], *axis).abs() + (a.2[1] + margin) * dot(aa[1], *axis).abs();
        let rb = (b.2[0] + margin) * dot(ba[0], *axis).abs() + (b.2[1] + margin) * dot(ba[1], *axis).abs();
        if dot(d, *axis).abs() > ra + rb {
            return false;
        }
    }
    true
}

fn footprint(pose: &Pose, size: &[f64; 3]) -> ([f64; 2], f64, [f64; 2]) {
    (
        [pose.translation.x, pose.translation.y],
        pose.yaw(),
        [0.5 * size[0], 0.5 * size[1]],
    )
}

fn ego_footprint(ego: &Pose) -> ([f64; 2], f64, [f64; 2]) {
    let c = ego.transform_point(&Vector3::from(EGO_CENTER));
    ([c.x, c.y], ego.yaw(), [0.5 * EGO_SIZE[0], 0.5 * EGO_SIZE[1]])
}

fn is_vehicle(c: Category) -> bool {
    !matches!(c, Category::Human | Category::Bicycle)
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(lo..hi))
}

fn face_colors(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [[f64; 3]; 6] {
    std::array::from_fn(|_| {
        let k = rng.gen_range(0.85..1.0);
        base.map(|c| c * k)
    })
}

fn generate_statics(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<StaticBox> {
    let [x0, x1] = cfg.x_range;
    let depth = cfg.half_extent - cfg.street_half_width;
    let mut out = Vec::new();
    for side in [1.0, -1.0] {
        let mut x = x0;
        while x < x1 {
            let len = rng.gen_range(cfg.building_length[0]..=cfg.building_length[1]).min(x1 - x);
            let h = rng.gen_range(cfg.building_height[0]..=cfg.building_height[1]);
            let y = side * (cfg.street_half_width + 0.5 * depth);
            let base = random_color(rng, 0.3, 0.85);
            out.push(StaticBox {
                pose: Pose::from_translation([x + 0.5 * len, y, 0.5 * h]),
                size: [len, depth, h],
                face_albedo: face_colors(rng, base),
            });
            x += len;
        }
    }
    for x in [x0 - 1.0, x1 + 1.0] {
        let h = rng.gen_range(cfg.building_height[0]..=cfg.building_height[1]);
        let base = random_color(rng, 0.3, 0.85);
        out.push(StaticBox {
            pose: Pose::from_translation([x, 0.0, 0.5 * h]),
            size: [2.0, 2.0 * cfg.half_extent, h],
            face_albedo: face_colors(rng, base),
        });
    }
    for _ in 0..cfg.props {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let s = rng.gen_range(0.5..0.8);
        let x = rng.gen_range(x0 + 2.0..x1 - 2.0);
        let base = random_color(rng, 0.2, 0.9);
        out.push(StaticBox {
            pose: Pose::from_yaw(rng.gen_range(-0.3..0.3), [x, side * (cfg.street_half_width - 0.6), 0.5 * s]),
            size: [s, s, s],
            face_albedo: face_colors(rng, base),
        });
    }
    out
}

/// Builds one actor track along a lane or sidewalk, straight or gently
/// curved, sampled at every frame time.
fn propose_actor(cfg: &WorldConfig, class: Category, id: String, rng: &mut ChaCha8Rng) -> Option<ActorTrack> {
    let size = class.nominal_size();
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (lane, max_bend) = if is_vehicle(class) {
        (side * 3.5, 0.6)
    } else {
        (side * (cfg.street_half_width - 2.0), 0.25)
    };
    // right-hand traffic: the left lane (y > 0) drives toward -x
    let heading = -side;
    let speed = class.nominal_speed() * rng.gen_range(0.5..1.0);
    let bend = if rng.gen_bool(0.5) { rng.gen_range(-max_bend..max_bend) } else { 0.0 };
    let span = cfg.duration().max(1e-9);
    let travel = speed * cfg.duration();
    let reach = 0.5 * size[0].hypot(size[1]) + 1.0;
    let lo = cfg.x_range[0] + reach + if heading < 0.0 { travel } else { 0.0 };
    let hi = cfg.x_range[1] - reach - if heading > 0.0 { travel } else { 0.0 };
    if lo >= hi {
        return None;
    }
    let x0 = rng.gen_range(lo..hi);
    let keyframes = (0..cfg.frames)
        .map(|k| {
            let t = cfg.frame_time(k);
            let x = x0 + heading * speed * t;
            let phase = std::f64::consts::PI * t / span;
            let y = lane + bend * phase.sin();
            let dy = bend * std::f64::consts::PI / span * phase.cos();
            let yaw = dy.atan2(heading * speed);
            (t, Pose::from_yaw(yaw, [x, y, 0.5 * size[2]]))
        })
        .collect();
    Some(ActorTrack {
        actor_id: id,
        class_name: class,
        size,
        keyframes,
    })
}

fn track_conflicts(
    track: &ActorTrack,
    statics: &[StaticBox],
    others: &[WorldActor],
    ego: &[(f64, Pose)],
    cfg: &WorldConfig,
) -> bool {
    let [x0, x1] = cfg.x_range;
    for (k, (t, pose)) in track.keyframes.iter().enumerate() {
        let fp = footprint(pose, &track.size);
        let r = 0.5 * track.size[0].hypot(track.size[1]);
        let p = pose.translation;
        if p.x - r < x0 || p.x + r > x1 || p.y.abs() + r > cfg.half_extent {
            return true;
        }
        if statics.iter().any(|b| rects_overlap(fp, footprint(&b.pose, &b.size), 0.2)) {
            return true;
        }
        if rects_overlap(fp, ego_footprint(&ego[k].1), 0.5) {
            return true;
        }
        if others
            .iter()
            .any(|o| rects_overlap(fp, footprint(&o.track.pose_at(*t), &o.track.size), 0.3))
        {
            return true;
        }
    }
    false
}

/// Generates the world for `seed`. Identical inputs give identical worlds.
pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<WorldScene, WorldError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego: Vec<(f64, Pose)> = (0..config.frames)
        .map(|k| {
            let t = config.frame_time(k);
            (t, Pose::from_translation([config.ego_speed * t, 0.0, 0.0]))
        })
        .collect();

    let statics = generate_statics(config, &mut rng);
    for (t, pose) in &ego {
        if statics.iter().any(|b| rects_overlap(ego_footprint(pose), footprint(&b.pose, &b.size), 0.2)) {
            return Err(WorldError::Infeasible {
                what: format!("the ego path at t = {t}"),
                attempts: 1,
            });
        }
    }

    let mut classes = config.actor_classes.clone();
    while classes.len() < config.actor_count {
        let pool = if config.actor_classes.is_empty() {
            &Category::ALL[..]
        } else {
            &config.actor_classes[..]
        };
        classes.push(pool[rng.gen_range(0..pool.len())]);
    }
    let mut actors: Vec<WorldActor> = Vec::with_capacity(classes.len());
    for (i, class) in classes.into_iter().enumerate() {
        let id = format!("{}-{i}", class.name().to_lowercase());
        let mut placed = None;
        for _ in 0..config.max_attempts {
            if let Some(track) = propose_actor(config, class, id.clone(), &mut rng) {
                if !track_conflicts(&track, &statics, &actors, &ego, config) {
                    placed = Some(track);
                    break;
                }
            }
        }
        let track = placed.ok_or_else(|| WorldError::Infeasible {
            what: format!("actor `{id}`"),
            attempts: config.max_attempts,
        })?;
        track.validate()?;
        actors.push(WorldActor {
            track,
            albedo: random_color(&mut rng, 0.1, 0.95),
        });
    }

    let elevation = rng.gen_range(25.0f64..60.0).to_radians();
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let sun = [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ];
    let sky = Sky {
        horizon: [
            rng.gen_range(0.70..0.85),
            rng.gen_range(0.78..0.90),
            rng.gen_range(0.88..0.98),
        ],
        zenith: [
            rng.gen_range(0.20..0.35),
            rng.gen_range(0.40..0.55),
            rng.gen_range(0.75..0.90),
        ],
        sun_color: [1.0, 0.97, 0.88],
        sun_radius: 0.15,
    };
    let g = rng.gen_range(0.35..0.45);
    let ground_albedo = [[g, g, g * 0.95], [g + 0.12, g + 0.12, g + 0.1]];
    let [x0, x1] = config.x_range;
    Ok(WorldScene {
        seed,
        config: config.clone(),
        ground_extent: [x0 - 2.0, -config.half_extent, x1 + 2.0, config.half_extent],
        ground_albedo,
        statics,
        actors,
        sky,
        sun_direction: sun,
        ego,
    })
}

/// File stem of one frame of one scene.
pub fn frame_name(scene: &str, frame: usize) -> String {
    format!("{scene}_{frame:03}")
}

/// Microsecond timestamp of a time in seconds.
pub fn timestamp_us(t: f64) -> i64 {
    TIME_ORIGIN_US + (t * 1e6).round() as i64
}

/// Serialized worlds of a split (`world.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub worlds: Vec<WorldScene>,
}

/// Paths of the two exported splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DualRigExport {
    pub suv_root: PathBuf,
    pub sub_root: PathBuf,
}

/// Table rows shared by every split of one scene: scene, samples, ego poses,
/// annotations and categories.
pub struct SceneTables {
    pub tables: DatasetTables,
    pub scene_name: String,
    /// Sample token per exported frame, in frame order.
    pub samples: Vec<(usize, String)>,
}

pub fn scene_tables(world: &WorldScene, scene_name: &str, frames: &[usize]) -> SceneTables {
    let mut t = DatasetTables::default();
    let scene_token = dataset::token(&format!("scene/{scene_name}"));
    let samples: Vec<(usize, String)> = frames
        .iter()
        .map(|f| (*f, dataset::token(&format!("sample/{scene_name}/{f}"))))
        .collect();
    t.scene.push(dataset::SceneRecord {
        token: scene_token.clone(),
        name: scene_name.to_string(),
        description: format!("procedural street canyon, seed {}", world.seed),
        first_sample_token: samples.first().map(|s| s.1.clone()).unwrap_or_default(),
        last_sample_token: samples.last().map(|s| s.1.clone()).unwrap_or_default(),
        nbr_samples: samples.len(),
    });
    let lidar_sensor = lidar_sensor_record(&world.config.lidar);
    for (i, (f, token)) in samples.iter().enumerate() {
        let time = world.frame_time(*f);
        let ego = world.ego_pose(*f);
        let pose_token = dataset::token(&format!("ego_pose/{scene_name}/{f}/{}", dataset::LIDAR_CHANNEL));
        t.ego_pose.push(dataset::EgoPoseRecord {
            token: pose_token.clone(),
            timestamp: timestamp_us(time),
            translation: ego.translation_array(),
            rotation: ego.wxyz(),
        });
        t.sample.push(dataset::SampleRecord {
            token: token.clone(),
            scene_token: scene_token.clone(),
            timestamp: timestamp_us(time),
            prev: if i == 0 { String::new() } else { samples[i - 1].1.clone() },
            next: samples.get(i + 1).map(|s| s.1.clone()).unwrap_or_default(),
            lidar_filename: format!("lidar/{}.xyz", frame_name(scene_name, *f)),
            lidar_sensor_token: lidar_sensor.token.clone(),
            lidar_ego_pose_token: pose_token,
        });
        let origin = lidar_origin(&ego, &world.config.lidar);
        for (ai, a) in world.actors.iter().enumerate() {
            let pose = a.track.pose_at(time);
            let s = a.track.size;
            t.sample_annotation.push(dataset::SampleAnnotationRecord {
                token: dataset::token(&format!("sample_annotation/{scene_name}/{f}/{}", a.track.actor_id)),
                sample_token: token.clone(),
                instance_token: dataset::token(&format!("instance/{scene_name}/{}", a.track.actor_id)),
                category: a.track.class_name.name().to_string(),
                translation: pose.translation_array(),
                size: [s[1], s[0], s[2]],
                rotation: pose.wxyz(),
                visibility: world.visibility(ai, time, &origin),
            });
        }
    }
    t.calibrated_sensor.push(lidar_sensor);
    let mut cats: Vec<Category> = world.actors.iter().map(|a| a.track.class_name).collect();
    cats.sort();
    cats.dedup();
    t.category = cats.into_iter().map(CategoryRecord::of).collect();
    SceneTables {
        tables: t,
        scene_name: scene_name.to_string(),
        samples,
    }
}

pub fn lidar_sensor_record(pattern: &LidarPattern) -> CalibratedSensorRecord {
    CalibratedSensorRecord {
        token: dataset::token(&format!("calibrated_sensor/{}", dataset::LIDAR_CHANNEL)),
        channel: dataset::LIDAR_CHANNEL.to_string(),
        translation: pattern.mount.translation_array(),
        rotation: pattern.mount.wxyz(),
        camera_intrinsic: vec![],
    }
}

pub fn camera_sensor_token(rig: &Rig, channel: &str) -> String {
    dataset::token(&format!("calibrated_sensor/{}/{channel}", rig.name))
}

/// Adds one split's camera records (calibration, sample data, per-camera ego
/// poses) for a scene.
pub fn add_camera_records(
    tables: &mut DatasetTables,
    split: &str,
    rig: &Rig,
    scene: &SceneTables,
    world_time: impl Fn(usize) -> (f64, Pose),
    is_key_frame: impl Fn(usize) -> bool,
) {
    for cam in &rig.cameras {
        let token = camera_sensor_token(rig, &cam.channel);
        if !tables.calibrated_sensor.iter().any(|c| c.token == token) {
            tables.calibrated_sensor.push(CalibratedSensorRecord::camera(token, cam));
        }
    }
    for (f, sample_token) in &scene.samples {
        let (time, ego) = world_time(*f);
        let name = frame_name(&scene.scene_name, *f);
        for cam in &rig.cameras {
            let pose_token = dataset::token(&format!("ego_pose/{}/{f}/{}", scene.scene_name, cam.channel));
            if !tables.ego_pose.iter().any(|p| p.token == pose_token) {
                tables.ego_pose.push(dataset::EgoPoseRecord {
                    token: pose_token.clone(),
                    timestamp: timestamp_us(time),
                    translation: ego.translation_array(),
                    rotation: ego.wxyz(),
                });
            }
            tables.sample_data.push(dataset::SampleDataRecord {
                token: dataset::token(&format!("sample_data/{split}/{}/{f}/{}", scene.scene_name, cam.channel)),
                sample_token: sample_token.clone(),
                ego_pose_token: pose_token,
                calibrated_sensor_token: camera_sensor_token(rig, &cam.channel),
                channel: cam.channel.clone(),
                filename: format!("sweeps/{}/{name}.ppm", cam.channel),
                sky_mask_filename: format!("sky/{}/{name}.pgm", cam.channel),
                width: cam.intrinsics.width,
                height: cam.intrinsics.height,
                timestamp: timestamp_us(time),
                is_key_frame: is_key_frame(*f),
            });
        }
    }
}

fn merge(into: &mut DatasetTables, from: DatasetTables) {
    into.scene.extend(from.scene);
    into.sample.extend(from.sample);
    into.sample_data.extend(from.sample_data);
    into.ego_pose.extend(from.ego_pose);
    for c in from.calibrated_sensor {
        if !into.calibrated_sensor.iter().any(|x| x.token == c.token) {
            into.calibrated_sensor.push(c);
        }
    }
    into.sample_annotation.extend(from.sample_annotation);
    for c in from.category {
        if !into.category.iter().any(|x| x.token == c.token) {
            into.category.push(c);
        }
    }
}

/// Scene name used for the `index`-th exported world.
pub fn scene_name(index: usize) -> String {
    format!("scene-{index:04}")
}

/// Writes `sim-SUV` (the given rig) and `sim-SUB` (the shifted rig) under
/// `out_dir`, rendering every camera of both rigs at the same timestamps.
pub fn export_dual_rig_dataset(
    world: &WorldScene,
    rig_suv: &Rig,
    shift: RigShift,
    out_dir: &Path,
    frames: &[usize],
) -> Result<DualRigExport, WorldError> {
    export_scenes(&[(world.clone(), frames.to_vec())], rig_suv, shift, out_dir)
}

/// Multi-scene form of [`export_dual_rig_dataset`].
pub fn export_scenes(
    worlds: &[(WorldScene, Vec<usize>)],
    rig_suv: &Rig,
    shift: RigShift,
    out_dir: &Path,
) -> Result<DualRigExport, WorldError> {
    let mut rig_sub = shift_rig(rig_suv, shift)?;
    rig_sub.name = "SUB".to_string();
    let splits = [(SUV_SPLIT, rig_suv), (SUB_SPLIT, &rig_sub)];
    for (world, frames) in worlds {
        if let Some(f) = frames.iter().find(|f| **f >= world.ego.len()) {
            return Err(WorldError::Config(format!("frame {f} beyond the world's {} frames", world.ego.len())));
        }
    }
    let world_file = WorldFile {
        worlds: worlds.iter().map(|(w, _)| w.clone()).collect(),
    };
    let world_json = serde_json::to_string_pretty(&world_file).expect("world serializes") + "\n";
    for (split, rig) in splits {
        let root = out_dir.join(split);
        let mut tables = DatasetTables::default();
        for (i, (world, frames)) in worlds.iter().enumerate() {
            let name = scene_name(i);
            let scene = scene_tables(world, &name, frames);
            let mut t = scene.tables.clone();
            add_camera_records(
                &mut t,
                split,
                rig,
                &scene,
                |f| (world.frame_time(f), world.ego_pose(f)),
                |f| world.config.is_held_out(f),
            );
            merge(&mut tables, t);
            let jobs: Vec<(usize, &Camera)> = frames
                .iter()
                .flat_map(|f| rig.cameras.iter().map(move |c| (*f, c)))
                .collect();
            jobs.par_iter().try_for_each(|(f, cam)| -> Result<(), DatasetError> {
                let frame = oracle_render(world, cam, &world.ego_pose(*f), world.frame_time(*f));
                let stem = frame_name(&name, *f);
                dataset::write_ppm(&root.join(format!("sweeps/{}/{stem}.ppm", cam.channel)), &frame.rgb)?;
                dataset::write_pgm(&root.join(format!("sky/{}/{stem}.pgm", cam.channel)), &frame.sky)
            })?;
            frames.par_iter().try_for_each(|f| -> Result<(), DatasetError> {
                let pts: Vec<[f64; 3]> =
                    sample_lidar(world, &world.ego_pose(*f), world.frame_time(*f), &world.config.lidar)
                        .into_iter()
                        .map(|p| p.point)
                        .collect();
                dataset::write_xyz(&root.join(format!("lidar/{}.xyz", frame_name(&name, *f))), &pts)
            })?;
        }
        dataset::write_tables(&tables, &root)?;
        dataset::write_file(&root.join("world.json"), world_json.as_bytes())?;
    }
    Ok(DualRigExport {
        suv_root: out_dir.join(SUV_SPLIT),
        sub_root: out_dir.join(SUB_SPLIT),
    })
}
