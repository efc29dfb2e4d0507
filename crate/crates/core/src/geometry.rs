//! Rigid poses, pinhole cameras, camera rigs and actor tracks.
//!
//! Frame conventions:
//! - ego frame: x forward, y left, z up
//! - camera optical frame: z forward, x right, y down
//!
//! A camera's `pose_in_ego` maps optical-frame points into the ego frame; an
//! ego pose maps ego-frame points into the world frame.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::category::Category;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid intrinsics for `{channel}`: {reason}")]
    InvalidIntrinsics { channel: String, reason: String },
    #[error("pixel ({u}, {v}) outside a {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("cannot classify cameras: {0}")]
    Classification(String),
    #[error("invalid shift: {0}")]
    InvalidShift(String),
    #[error("invalid actor track `{id}`: {reason}")]
    InvalidTrack { id: String, reason: String },
    #[error("invalid quaternion {0:?}")]
    InvalidQuaternion([f64; 4]),
    #[error("rig config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rigid transform: rotation (unit quaternion) followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, normalizing it unless
    /// it is already unit to within rounding (so serialization round-trips).
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(GeometryError::InvalidQuaternion(q));
        }
        let rotation = if (norm - 1.0).abs() < 1e-14 {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::from_quaternion(quat)
        };
        Ok(Self {
            rotation,
            translation: Vector3::from(translation),
        })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Rotation by `yaw` radians about +z, then translation.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        Self {
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation: Vector3::from(translation),
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Heading angle of the rotated x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        let fwd = self.rotation * Vector3::x();
        fwd.y.atan2(fwd.x)
    }
}

/// Serialized form: `{"rotation": [w, x, y, z], "translation": [x, y, z]}`.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            rotation: self.wxyz(),
            translation: self.translation_array(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        Pose::from_wxyz(r.rotation, r.translation).map_err(serde::de::Error::custom)
    }
}

pub fn transform_point(pose: &Pose, p: [f64; 3]) -> [f64; 3] {
    let q = pose.transform_point(&Vector3::from(p));
    [q.x, q.y, q.z]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self, channel: &str) -> Result<(), GeometryError> {
        let fail = |reason: &str| {
            Err(GeometryError::InvalidIntrinsics {
                channel: channel.to_string(),
                reason: reason.to_string(),
            })
        };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return fail("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return fail("image size must be positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return fail("cx outside (0, width)");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return fail("cy outside (0, height)");
        }
        Ok(())
    }

    /// Intrinsics of the same camera sampled `factor` times coarser.
    pub fn downscaled(&self, factor: u32) -> Self {
        let s = factor as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    /// 3x3 row-major intrinsic matrix.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub channel: String,
    pub intrinsics: CameraIntrinsics,
    pub pose_in_ego: Pose,
}

/// Pixel coordinates and optical-axis depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, near: f64, far: f64) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            near,
            far,
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

impl Camera {
    /// Camera-to-world transform for a given ego pose.
    pub fn world_pose(&self, ego_pose: &Pose) -> Pose {
        ego_pose.compose(&self.pose_in_ego)
    }

    /// Projects a world point; `None` when it lies at or behind the image plane.
    pub fn project(&self, p_world: &Vector3<f64>, ego_pose: &Pose) -> Option<PixelProjection> {
        let p = self.world_pose(ego_pose).inverse().transform_point(p_world);
        if p.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some(PixelProjection {
            u: k.fx * p.x / p.z + k.cx,
            v: k.fy * p.y / p.z + k.cy,
            depth: p.z,
        })
    }

    /// World-frame ray through image point `(u, v)`. Pixel `(i, j)` has its
    /// center at `(i + 0.5, j + 0.5)`.
    pub fn pixel_to_ray(
        &self,
        u: f64,
        v: f64,
        ego_pose: &Pose,
        near: f64,
        far: f64,
    ) -> Result<Ray, GeometryError> {
        let k = &self.intrinsics;
        if !(u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64) {
            return Err(GeometryError::PixelOutOfBounds {
                u,
                v,
                width: k.width,
                height: k.height,
            });
        }
        Ok(self.unchecked_ray(u, v, ego_pose, near, far))
    }

    pub(crate) fn unchecked_ray(&self, u: f64, v: f64, ego_pose: &Pose, near: f64, far: f64) -> Ray {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let pose = self.world_pose(ego_pose);
        Ray::new(pose.translation, pose.transform_vector(&dir_cam), near, far)
    }
}

pub fn project(cam: &Camera, p_world: [f64; 3], ego_pose: &Pose) -> Option<PixelProjection> {
    cam.project(&Vector3::from(p_world), ego_pose)
}

pub fn pixel_to_ray(
    cam: &Camera,
    u: f64,
    v: f64,
    ego_pose: &Pose,
    near: f64,
    far: f64,
) -> Result<Ray, GeometryError> {
    cam.pixel_to_ray(u, v, ego_pose, near, far)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub name: String,
    pub cameras: Vec<Camera>,
}

const DEFAULT_RIG_TOML: &str = include_str!("../configs/rig_suv.toml");

#[derive(Debug, Serialize, Deserialize)]
struct RigFile {
    name: String,
    #[serde(default)]
    channels: Option<Vec<String>>,
    camera: BTreeMap<String, CameraEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraEntry {
    translation: [f64; 3],
    rotation: [f64; 4],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl Rig {
    /// The shipped six-camera SUV rig (`configs/rig_suv.toml`).
    pub fn default_suv() -> Self {
        Self::from_toml_str(DEFAULT_RIG_TOML).expect("bundled rig config is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, GeometryError> {
        let file: RigFile = toml::from_str(text).map_err(|e| GeometryError::Config(e.to_string()))?;
        let order = match &file.channels {
            Some(order) => order.clone(),
            None => file.camera.keys().cloned().collect(),
        };
        let mut cameras = Vec::with_capacity(order.len());
        for channel in &order {
            let e = file
                .camera
                .get(channel)
                .ok_or_else(|| GeometryError::Config(format!("no [camera.{channel}] table")))?;
            cameras.push(Camera {
                channel: channel.clone(),
                intrinsics: CameraIntrinsics {
                    fx: e.fx,
                    fy: e.fy,
                    cx: e.cx,
                    cy: e.cy,
                    width: e.width,
                    height: e.height,
                },
                pose_in_ego: Pose::from_wxyz(e.rotation, e.translation)?,
            });
        }
        if cameras.len() != file.camera.len() {
            return Err(GeometryError::Config(
                "`channels` must list every camera table exactly once".into(),
            ));
        }
        let rig = Rig {
            name: file.name,
            cameras,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        let file = RigFile {
            name: self.name.clone(),
            channels: Some(self.cameras.iter().map(|c| c.channel.clone()).collect()),
            camera: self
                .cameras
                .iter()
                .map(|c| {
                    let k = c.intrinsics;
                    (
                        c.channel.clone(),
                        CameraEntry {
                            translation: c.pose_in_ego.translation_array(),
                            rotation: c.pose_in_ego.wxyz(),
                            fx: k.fx,
                            fy: k.fy,
                            cx: k.cx,
                            cy: k.cy,
                            width: k.width,
                            height: k.height,
                        },
                    )
                })
                .collect(),
        };
        toml::to_string(&file).expect("rig serializes")
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.cameras.is_empty() {
            return Err(GeometryError::InvalidRig("rig has no cameras".into()));
        }
        let mut seen = HashSet::new();
        for cam in &self.cameras {
            if cam.channel.is_empty() {
                return Err(GeometryError::InvalidRig("empty channel name".into()));
            }
            if !seen.insert(cam.channel.as_str()) {
                return Err(GeometryError::InvalidRig(format!(
                    "duplicate channel `{}`",
                    cam.channel
                )));
            }
            cam.intrinsics.validate(&cam.channel)?;
        }
        Ok(())
    }

    pub fn camera(&self, channel: &str) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.channel == channel)
    }
}

/// Mounting change between two vehicle platforms: cameras are lowered by
/// `dz`, the front-to-rear spread shrinks by `d_long` and the left-to-right
/// spread by `d_lat` (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigShift {
    pub dz: f64,
    pub d_long: f64,
    pub d_lat: f64,
}

impl RigShift {
    /// SUV to subcompact: 50 cm lower, 90 cm shorter, 20 cm narrower.
    pub const SUV_TO_SUBCOMPACT: RigShift = RigShift {
        dz: 0.50,
        d_long: 0.90,
        d_lat: 0.20,
    };

    pub const ZERO: RigShift = RigShift {
        dz: 0.0,
        d_long: 0.0,
        d_lat: 0.0,
    };
}

impl FromStr for RigShift {
    type Err = GeometryError;

    /// Parses `dz,d_long,d_lat`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::InvalidShift(format!("`{s}`: {e}")))?;
        match parts[..] {
            [dz, d_long, d_lat] => Ok(RigShift { dz, d_long, d_lat }),
            _ => Err(GeometryError::InvalidShift(format!(
                "`{s}`: expected dz,d_long,d_lat"
            ))),
        }
    }
}

/// Side of the rig midpoint a camera sits on along one axis.
fn side(value: f64, mid: f64, spread: f64) -> f64 {
    let tol = 1e-9 * spread.max(1.0);
    if value > mid + tol {
        1.0
    } else if value < mid - tol {
        -1.0
    } else {
        0.0
    }
}

/// Moves every camera of `rig` to the mounting positions of the shifted
/// platform. Orientations, intrinsics and channel order are kept.
///
/// Cameras ahead of the rig's longitudinal midpoint move back by
/// `d_long / 2`, cameras behind it move forward by the same amount;
/// left/right cameras move toward the lateral midline by `d_lat / 2`.
pub fn shift_rig(rig: &Rig, shift: RigShift) -> Result<Rig, GeometryError> {
    rig.validate()?;
    let xs: Vec<f64> = rig.cameras.iter().map(|c| c.pose_in_ego.translation.x).collect();
    let ys: Vec<f64> = rig.cameras.iter().map(|c| c.pose_in_ego.translation.y).collect();
    let (min_x, max_x) = min_max(&xs);
    let (min_y, max_y) = min_max(&ys);
    let spread_x = max_x - min_x;
    let spread_y = max_y - min_y;
    if spread_x < 1e-9 {
        return Err(GeometryError::Classification(
            "all cameras share one longitudinal position".into(),
        ));
    }
    if spread_y < 1e-9 && shift.d_lat != 0.0 {
        return Err(GeometryError::Classification(
            "all cameras share one lateral position".into(),
        ));
    }
    if shift.d_long < 0.0 || shift.d_lat < 0.0 {
        return Err(GeometryError::InvalidShift(
            "gap reductions must be non-negative".into(),
        ));
    }
    let mid_x = 0.5 * (min_x + max_x);
    let mid_y = 0.5 * (min_y + max_y);
    let half_long = 0.5 * shift.d_long;
    let half_lat = 0.5 * shift.d_lat;

    let mut cameras = Vec::with_capacity(rig.cameras.len());
    for cam in &rig.cameras {
        let t = cam.pose_in_ego.translation;
        let sx = side(t.x, mid_x, spread_x);
        let sy = side(t.y, mid_y, spread_y);
        if sx != 0.0 && (t.x - mid_x).abs() < half_long {
            return Err(GeometryError::InvalidShift(format!(
                "`{}` would cross the longitudinal midpoint",
                cam.channel
            )));
        }
        if sy != 0.0 && (t.y - mid_y).abs() < half_lat {
            return Err(GeometryError::InvalidShift(format!(
                "`{}` would cross the lateral midline",
                cam.channel
            )));
        }
        let z = t.z - shift.dz;
        if z <= 0.0 {
            return Err(GeometryError::InvalidShift(format!(
                "`{}` would end at height {z} m",
                cam.channel
            )));
        }
        let mut pose = cam.pose_in_ego;
        pose.translation = Vector3::new(t.x - sx * half_long, t.y - sy * half_lat, z);
        cameras.push(Camera {
            channel: cam.channel.clone(),
            intrinsics: cam.intrinsics,
            pose_in_ego: pose,
        });
    }
    Ok(Rig {
        name: format!("{}-shifted", rig.name),
        cameras,
    })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// A rigid actor with a tracked bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorTrack {
    pub actor_id: String,
    pub class_name: Category,
    /// (length, width, height) in meters along the box x, y, z axes.
    pub size: [f64; 3],
    /// (timestamp seconds, box-center pose in the world frame).
    pub keyframes: Vec<(f64, Pose)>,
}

/// A point in an actor's box frame, scaled so the box spans [-1, 1]^3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLocal {
    pub coords: [f64; 3],
    pub inside: bool,
}

impl ActorTrack {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let fail = |reason: &str| {
            Err(GeometryError::InvalidTrack {
                id: self.actor_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.keyframes.is_empty() {
            return fail("no keyframes");
        }
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return fail("size components must be positive");
        }
        if self.keyframes.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return fail("timestamps must be strictly increasing");
        }
        Ok(())
    }

    pub fn time_span(&self) -> (f64, f64) {
        (
            self.keyframes.first().map_or(0.0, |k| k.0),
            self.keyframes.last().map_or(0.0, |k| k.0),
        )
    }

    /// Box-center pose at time `t`, clamped to the keyframe range.
    pub fn pose_at(&self, t: f64) -> Pose {
        let kf = &self.keyframes;
        let first = &kf[0];
        let last = &kf[kf.len() - 1];
        if t <= first.0 {
            return first.1;
        }
        if t >= last.0 {
            return last.1;
        }
        // first index with timestamp > t; t lies in [kf[i-1].0, kf[i].0)
        let i = kf.partition_point(|k| k.0 <= t);
        let (t0, p0) = kf[i - 1];
        if t == t0 {
            return p0;
        }
        let (t1, p1) = kf[i];
        let a = (t - t0) / (t1 - t0);
        Pose {
            rotation: slerp(&p0.rotation, &p1.rotation, a),
            translation: p0.translation * (1.0 - a) + p1.translation * a,
        }
    }

    pub fn to_box_local(&self, t: f64, p_world: &Vector3<f64>) -> BoxLocal {
        self.to_box_local_at(&self.pose_at(t).inverse(), p_world)
    }

    /// Same as [`ActorTrack::to_box_local`] given the inverse box pose.
    pub fn to_box_local_at(&self, world_to_box: &Pose, p_world: &Vector3<f64>) -> BoxLocal {
        let p = world_to_box.transform_point(p_world);
        let coords = [
            p.x / (0.5 * self.size[0]),
            p.y / (0.5 * self.size[1]),
            p.z / (0.5 * self.size[2]),
        ];
        BoxLocal {
            coords,
            inside: coords.iter().all(|c| c.abs() <= 1.0),
        }
    }
}

/// Shortest-arc spherical interpolation between unit quaternions.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion();
    let mut qb = *b.quaternion();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let q = if dot > 0.9995 {
        qa * (1.0 - t) + qb * t
    } else {
        let theta = dot.clamp(-1.0, 1.0).acos();
        let s = theta.sin();
        qa * (((1.0 - t) * theta).sin() / s) + qb * ((t * theta).sin() / s)
    };
    UnitQuaternion::from_quaternion(q)
}

pub fn interpolate_track(track: &ActorTrack, t: f64) -> Pose {
    track.pose_at(t)
}

pub fn world_to_box_local(track: &ActorTrack, t: f64, p_world: [f64; 3]) -> BoxLocal {
    track.to_box_local(t, &Vector3::from(p_world))
}
