//! Relational scene tables in the layout of common driving datasets, plus
//! the on-disk image, mask and lidar formats.
//!
//! Layout under a split root:
//! - `v1.0/<table>.json`: one JSON array per table, sorted by token
//! - `sweeps/<CHANNEL>/<name>.ppm`: camera images (binary P6, 8 bit)
//! - `sky/<CHANNEL>/<name>.pgm`: sky masks (binary P5, 255 = sky)
//! - `lidar/<name>.xyz`: world-frame lidar hits, one `x y z` line each
//! - `world.json`: the generating world, when procedurally generated

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::category::Category;
use crate::geometry::{Camera, CameraIntrinsics, Pose};
use crate::image::{Mask, RgbImage};

pub const TABLE_DIR: &str = "v1.0";
pub const TABLE_NAMES: [&str; 7] = [
    "scene",
    "sample",
    "sample_data",
    "ego_pose",
    "calibrated_sensor",
    "sample_annotation",
    "category",
];
pub const LIDAR_CHANNEL: &str = "LIDAR_TOP";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing table `{0}`")]
    MissingTable(String),
    #[error("malformed {what}: {reason}")]
    Malformed { what: String, reason: String },
    #[error("dangling reference: {0}")]
    Dangling(ValidationIssue),
    #[error("invalid tables: {}", list(.0))]
    Invalid(Vec<ValidationIssue>),
}

fn list(issues: &[ValidationIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One violated table invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationIssue {
    DuplicateToken { table: &'static str, token: String },
    DanglingToken { table: &'static str, token: String, field: &'static str, target: String },
    UnknownCategory { token: String, name: String },
    Ordering { scene: String, reason: String },
    DuplicateSensor { sample: String, channel: String },
    InvalidRecord { table: &'static str, token: String, reason: String },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateToken { table, token } => write!(f, "duplicate token {token} in {table}"),
            Self::DanglingToken {
                table,
                token,
                field,
                target,
            } => write!(f, "{table} {token}: {field} -> unknown token `{target}`"),
            Self::UnknownCategory { token, name } => write!(f, "category {token}: `{name}` is not a known class"),
            Self::Ordering { scene, reason } => write!(f, "scene {scene}: sample order: {reason}"),
            Self::DuplicateSensor { sample, channel } => {
                write!(f, "sample {sample}: more than one {channel} record")
            }
            Self::InvalidRecord { table, token, reason } => write!(f, "{table} {token}: {reason}"),
        }
    }
}

/// Deterministic record token: 32 hex characters of SHA-256 over `key`.
pub fn token(key: &str) -> String {
    hex::encode(&Sha256::digest(key.as_bytes())[..16])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub token: String,
    pub name: String,
    pub description: String,
    pub first_sample_token: String,
    pub last_sample_token: String,
    pub nbr_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub token: String,
    pub scene_token: String,
    /// Microseconds.
    pub timestamp: i64,
    /// Empty when this is the first sample.
    pub prev: String,
    /// Empty when this is the last sample.
    pub next: String,
    /// Relative path of the lidar sweep; empty when there is none.
    pub lidar_filename: String,
    pub lidar_sensor_token: String,
    pub lidar_ego_pose_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDataRecord {
    pub token: String,
    pub sample_token: String,
    pub ego_pose_token: String,
    pub calibrated_sensor_token: String,
    pub channel: String,
    pub filename: String,
    pub sky_mask_filename: String,
    pub width: u32,
    pub height: u32,
    pub timestamp: i64,
    /// Held-out evaluation frame.
    pub is_key_frame: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoPoseRecord {
    pub token: String,
    pub timestamp: i64,
    pub translation: [f64; 3],
    /// (w, x, y, z)
    pub rotation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSensorRecord {
    pub token: String,
    pub channel: String,
    pub translation: [f64; 3],
    /// (w, x, y, z), sensor to ego.
    pub rotation: [f64; 4],
    /// 3x3 pinhole matrix; empty for non-camera sensors.
    pub camera_intrinsic: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAnnotationRecord {
    pub token: String,
    pub sample_token: String,
    /// Identifies the same object across samples.
    pub instance_token: String,
    pub category: String,
    pub translation: [f64; 3],
    /// (width, length, height) in meters.
    pub size: [f64; 3],
    /// (w, x, y, z), box to world.
    pub rotation: [f64; 4],
    /// Fraction of the object visible from the ego sensor origin.
    pub visibility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub token: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetTables {
    pub scene: Vec<SceneRecord>,
    pub sample: Vec<SampleRecord>,
    pub sample_data: Vec<SampleDataRecord>,
    pub ego_pose: Vec<EgoPoseRecord>,
    pub calibrated_sensor: Vec<CalibratedSensorRecord>,
    pub sample_annotation: Vec<SampleAnnotationRecord>,
    pub category: Vec<CategoryRecord>,
}

impl CategoryRecord {
    pub fn of(c: Category) -> Self {
        Self {
            token: token(&format!("category/{}", c.name())),
            name: c.name().to_string(),
            description: String::new(),
        }
    }
}

impl CalibratedSensorRecord {
    pub fn camera(token: String, camera: &Camera) -> Self {
        let k = camera.intrinsics.matrix();
        Self {
            token,
            channel: camera.channel.clone(),
            translation: camera.pose_in_ego.translation_array(),
            rotation: camera.pose_in_ego.wxyz(),
            camera_intrinsic: k.to_vec(),
        }
    }

    pub fn pose(&self) -> Result<Pose, DatasetError> {
        Pose::from_wxyz(self.rotation, self.translation).map_err(|e| DatasetError::Malformed {
            what: format!("calibrated_sensor {}", self.token),
            reason: e.to_string(),
        })
    }

    /// Rebuilds the camera given the image size of its sample data.
    pub fn to_camera(&self, width: u32, height: u32) -> Result<Camera, DatasetError> {
        let bad = |reason: &str| DatasetError::Malformed {
            what: format!("calibrated_sensor {}", self.token),
            reason: reason.to_string(),
        };
        let k = &self.camera_intrinsic;
        if k.len() != 3 {
            return Err(bad("camera_intrinsic must be 3x3"));
        }
        let intrinsics = CameraIntrinsics {
            fx: k[0][0],
            fy: k[1][1],
            cx: k[0][2],
            cy: k[1][2],
            width,
            height,
        };
        intrinsics.validate(&self.channel).map_err(|e| bad(&e.to_string()))?;
        Ok(Camera {
            channel: self.channel.clone(),
            intrinsics,
            pose_in_ego: self.pose()?,
        })
    }
}

impl EgoPoseRecord {
    pub fn pose(&self) -> Result<Pose, DatasetError> {
        Pose::from_wxyz(self.rotation, self.translation).map_err(|e| DatasetError::Malformed {
            what: format!("ego_pose {}", self.token),
            reason: e.to_string(),
        })
    }
}

impl DatasetTables {
    /// Sorts every table by token.
    pub fn sort(&mut self) {
        self.scene.sort_by(|a, b| a.token.cmp(&b.token));
        self.sample.sort_by(|a, b| a.token.cmp(&b.token));
        self.sample_data.sort_by(|a, b| a.token.cmp(&b.token));
        self.ego_pose.sort_by(|a, b| a.token.cmp(&b.token));
        self.calibrated_sensor.sort_by(|a, b| a.token.cmp(&b.token));
        self.sample_annotation.sort_by(|a, b| a.token.cmp(&b.token));
        self.category.sort_by(|a, b| a.token.cmp(&b.token));
    }

    /// Samples of a scene in linked order.
    pub fn scene_samples(&self, scene: &SceneRecord) -> Vec<&SampleRecord> {
        let by_token: HashMap<&str, &SampleRecord> = self.sample.iter().map(|s| (s.token.as_str(), s)).collect();
        let mut out = Vec::new();
        let mut cur = scene.first_sample_token.as_str();
        while let Some(s) = by_token.get(cur) {
            if out.len() > self.sample.len() {
                break;
            }
            out.push(*s);
            cur = s.next.as_str();
        }
        out
    }
}

fn unit_quaternion(q: &[f64; 4]) -> bool {
    let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter().all(|v| v.is_finite()) && (n - 1.0).abs() < 1e-6
}

/// Checks every table invariant. Returns an empty list iff the tables are valid.
pub fn validate(t: &DatasetTables) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    fn index<'a>(
        table: &'static str,
        keys: impl Iterator<Item = &'a str>,
        issues: &mut Vec<ValidationIssue>,
    ) -> HashSet<&'a str> {
        let mut seen = HashSet::new();
        for k in keys {
            if !seen.insert(k) {
                issues.push(ValidationIssue::DuplicateToken {
                    table,
                    token: k.to_string(),
                });
            }
        }
        seen
    }
    let scenes = index("scene", t.scene.iter().map(|r| r.token.as_str()), &mut issues);
    let samples = index("sample", t.sample.iter().map(|r| r.token.as_str()), &mut issues);
    let _ = index("sample_data", t.sample_data.iter().map(|r| r.token.as_str()), &mut issues);
    let poses = index("ego_pose", t.ego_pose.iter().map(|r| r.token.as_str()), &mut issues);
    let sensors = index("calibrated_sensor", t.calibrated_sensor.iter().map(|r| r.token.as_str()), &mut issues);
    let _ = index("sample_annotation", t.sample_annotation.iter().map(|r| r.token.as_str()), &mut issues);
    let _ = index("category", t.category.iter().map(|r| r.token.as_str()), &mut issues);

    let dangling = |issues: &mut Vec<ValidationIssue>, table, token: &str, field, target: &str| {
        issues.push(ValidationIssue::DanglingToken {
            table,
            token: token.to_string(),
            field,
            target: target.to_string(),
        })
    };

    let mut category_names = HashSet::new();
    for c in &t.category {
        if c.name.parse::<Category>().is_err() {
            issues.push(ValidationIssue::UnknownCategory {
                token: c.token.clone(),
                name: c.name.clone(),
            });
        }
        category_names.insert(c.name.as_str());
    }

    for s in &t.scene {
        for (field, target) in [("first_sample_token", &s.first_sample_token), ("last_sample_token", &s.last_sample_token)] {
            if !samples.contains(target.as_str()) {
                dangling(&mut issues, "scene", &s.token, field, target);
            }
        }
    }
    for s in &t.sample {
        if !scenes.contains(s.scene_token.as_str()) {
            dangling(&mut issues, "sample", &s.token, "scene_token", &s.scene_token);
        }
        for (field, target) in [("prev", &s.prev), ("next", &s.next)] {
            if !target.is_empty() && !samples.contains(target.as_str()) {
                dangling(&mut issues, "sample", &s.token, field, target);
            }
        }
        if !s.lidar_filename.is_empty() {
            if !sensors.contains(s.lidar_sensor_token.as_str()) {
                dangling(&mut issues, "sample", &s.token, "lidar_sensor_token", &s.lidar_sensor_token);
            }
            if !poses.contains(s.lidar_ego_pose_token.as_str()) {
                dangling(&mut issues, "sample", &s.token, "lidar_ego_pose_token", &s.lidar_ego_pose_token);
            }
        }
    }
    let mut per_sample_channel = HashSet::new();
    for d in &t.sample_data {
        if !samples.contains(d.sample_token.as_str()) {
            dangling(&mut issues, "sample_data", &d.token, "sample_token", &d.sample_token);
        }
        if !poses.contains(d.ego_pose_token.as_str()) {
            dangling(&mut issues, "sample_data", &d.token, "ego_pose_token", &d.ego_pose_token);
        }
        if !sensors.contains(d.calibrated_sensor_token.as_str()) {
            dangling(
                &mut issues,
                "sample_data",
                &d.token,
                "calibrated_sensor_token",
                &d.calibrated_sensor_token,
            );
        }
        if !per_sample_channel.insert((d.sample_token.as_str(), d.channel.as_str())) {
            issues.push(ValidationIssue::DuplicateSensor {
                sample: d.sample_token.clone(),
                channel: d.channel.clone(),
            });
        }
        if d.width == 0 || d.height == 0 {
            issues.push(ValidationIssue::InvalidRecord {
                table: "sample_data",
                token: d.token.clone(),
                reason: "empty image".into(),
            });
        }
    }
    for p in &t.ego_pose {
        if !unit_quaternion(&p.rotation) || p.translation.iter().any(|v| !v.is_finite()) {
            issues.push(ValidationIssue::InvalidRecord {
                table: "ego_pose",
                token: p.token.clone(),
                reason: "rotation must be a unit quaternion and translation finite".into(),
            });
        }
    }
    for c in &t.calibrated_sensor {
        let k_ok = c.camera_intrinsic.is_empty() || c.camera_intrinsic.len() == 3;
        if !unit_quaternion(&c.rotation) || !k_ok {
            issues.push(ValidationIssue::InvalidRecord {
                table: "calibrated_sensor",
                token: c.token.clone(),
                reason: "rotation must be a unit quaternion and camera_intrinsic 3x3 or empty".into(),
            });
        }
    }
    for a in &t.sample_annotation {
        if !samples.contains(a.sample_token.as_str()) {
            dangling(&mut issues, "sample_annotation", &a.token, "sample_token", &a.sample_token);
        }
        if a.category.parse::<Category>().is_err() {
            issues.push(ValidationIssue::UnknownCategory {
                token: a.token.clone(),
                name: a.category.clone(),
            });
        } else if !category_names.contains(a.category.as_str()) {
            dangling(&mut issues, "sample_annotation", &a.token, "category", &a.category);
        }
        let mut reasons = Vec::new();
        if a.size.iter().any(|s| !(*s > 0.0)) {
            reasons.push("size must be positive");
        }
        if !unit_quaternion(&a.rotation) {
            reasons.push("rotation must be a unit quaternion");
        }
        if !(0.0..=1.0).contains(&a.visibility) {
            reasons.push("visibility must lie in [0, 1]");
        }
        for r in reasons {
            issues.push(ValidationIssue::InvalidRecord {
                table: "sample_annotation",
                token: a.token.clone(),
                reason: r.into(),
            });
        }
    }

    // linked order of samples within each scene
    let by_token: HashMap<&str, &SampleRecord> = t.sample.iter().map(|s| (s.token.as_str(), s)).collect();
    for scene in &t.scene {
        let order = |reason: String| ValidationIssue::Ordering {
            scene: scene.token.clone(),
            reason,
        };
        let Some(first) = by_token.get(scene.first_sample_token.as_str()) else {
            continue;
        };
        if !first.prev.is_empty() {
            issues.push(order("first sample has a predecessor".into()));
        }
        let mut visited = vec![*first];
        let mut cur = *first;
        while !cur.next.is_empty() {
            let Some(n) = by_token.get(cur.next.as_str()) else { break };
            if n.prev != cur.token {
                issues.push(order(format!("{} does not link back to {}", n.token, cur.token)));
            }
            if n.timestamp <= cur.timestamp {
                issues.push(order(format!("timestamp of {} is not after {}", n.token, cur.token)));
            }
            if visited.len() > t.sample.len() {
                issues.push(order("cycle in next links".into()));
                break;
            }
            visited.push(n);
            cur = n;
        }
        if cur.token != scene.last_sample_token {
            issues.push(order("chain does not end at last_sample_token".into()));
        }
        if visited.len() != scene.nbr_samples {
            issues.push(order(format!("{} samples linked, nbr_samples is {}", visited.len(), scene.nbr_samples)));
        }
        let in_scene = t.sample.iter().filter(|s| s.scene_token == scene.token).count();
        if in_scene != visited.len() {
            issues.push(order(format!("{in_scene} samples reference the scene, {} are linked", visited.len())));
        }
    }
    issues
}

fn table_path(root: &Path, name: &str) -> PathBuf {
    root.join(TABLE_DIR).join(format!("{name}.json"))
}

fn write_json<T: Serialize>(path: &Path, rows: &T) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(rows).map_err(|e| DatasetError::Malformed {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Validates and writes every table as `<root>/v1.0/<table>.json`, sorted
/// by token. Returns the written paths.
pub fn write_tables(tables: &DatasetTables, root: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let issues = validate(tables);
    if !issues.is_empty() {
        return Err(DatasetError::Invalid(issues));
    }
    let mut t = tables.clone();
    t.sort();
    let paths: Vec<PathBuf> = TABLE_NAMES.iter().map(|n| table_path(root, n)).collect();
    write_json(&paths[0], &t.scene)?;
    write_json(&paths[1], &t.sample)?;
    write_json(&paths[2], &t.sample_data)?;
    write_json(&paths[3], &t.ego_pose)?;
    write_json(&paths[4], &t.calibrated_sensor)?;
    write_json(&paths[5], &t.sample_annotation)?;
    write_json(&paths[6], &t.category)?;
    Ok(paths)
}

fn read_table<T: DeserializeOwned>(root: &Path, name: &str) -> Result<Vec<T>, DatasetError> {
    let path = table_path(root, name);
    if !path.is_file() {
        return Err(DatasetError::MissingTable(name.to_string()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
        what: format!("table `{name}`"),
        reason: e.to_string(),
    })
}

/// Reads tables without validating them.
pub fn read_tables_unchecked(root: &Path) -> Result<DatasetTables, DatasetError> {
    Ok(DatasetTables {
        scene: read_table(root, "scene")?,
        sample: read_table(root, "sample")?,
        sample_data: read_table(root, "sample_data")?,
        ego_pose: read_table(root, "ego_pose")?,
        calibrated_sensor: read_table(root, "calibrated_sensor")?,
        sample_annotation: read_table(root, "sample_annotation")?,
        category: read_table(root, "category")?,
    })
}

/// Reads and validates the tables of a split.
pub fn read_tables(root: &Path) -> Result<DatasetTables, DatasetError> {
    let t = read_tables_unchecked(root)?;
    let issues = validate(&t);
    if let Some(d) = issues.iter().find(|i| matches!(i, ValidationIssue::DanglingToken { .. })) {
        return Err(DatasetError::Dangling(d.clone()));
    }
    if !issues.is_empty() {
        return Err(DatasetError::Invalid(issues));
    }
    Ok(t)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), DatasetError> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.to_bytes());
    write_file(path, &bytes)
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<(), DatasetError> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend(mask.data.iter().map(|v| if *v != 0 { 255u8 } else { 0 }));
    write_file(path, &bytes)
}

/// Parses a binary netpbm header; returns (width, height, payload offset).
fn netpbm_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize), DatasetError> {
    let bad = |reason: &str| DatasetError::Malformed {
        what: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad("wrong magic number"));
    }
    let mut fields = Vec::with_capacity(3);
    let mut i = 2;
    while fields.len() < 3 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..i])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
        fields.push(v);
    }
    if fields[2] != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(bad("truncated header"));
    }
    Ok((fields[0], fields[1], i + 1))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, off) = netpbm_header(&bytes, b"P6", path)?;
    if bytes.len() - off != w * h * 3 {
        return Err(DatasetError::Malformed {
            what: path.display().to_string(),
            reason: "payload size does not match header".into(),
        });
    }
    Ok(RgbImage::from_bytes(w, h, &bytes[off..]))
}

pub fn read_pgm(path: &Path) -> Result<Mask, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, off) = netpbm_header(&bytes, b"P5", path)?;
    if bytes.len() - off != w * h {
        return Err(DatasetError::Malformed {
            what: path.display().to_string(),
            reason: "payload size does not match header".into(),
        });
    }
    Ok(Mask {
        width: w,
        height: h,
        data: bytes[off..].iter().map(|v| (*v > 127) as u8).collect(),
    })
}

pub fn write_xyz(path: &Path, points: &[[f64; 3]]) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(points.len() * 40);
    for p in points {
        writeln!(buf, "{} {} {}", p[0], p[1], p[2]).expect("writing to a Vec cannot fail");
    }
    write_file(path, &buf)
}

pub fn read_xyz(path: &Path) -> Result<Vec<[f64; 3]>, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|e| {
            DatasetError::Malformed {
                what: format!("{} line {}", path.display(), n + 1),
                reason: format!("{e}"),
            }
        })?;
        if v.len() != 3 {
            return Err(DatasetError::Malformed {
                what: format!("{} line {}", path.display(), n + 1),
                reason: "expected `x y z`".into(),
            });
        }
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}

/// Copies a file tree; used to carry tables and assets between splits.
pub fn copy_file(from: &Path, to: &Path) -> Result<(), DatasetError> {
    if let Some(dir) = to.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::copy(from, to).map_err(io_err(from))?;
    Ok(())
}

/// SHA-256 of every regular file under `root`, keyed by relative path.
pub fn tree_digest(root: &Path) -> Result<BTreeMap<String, String>, DatasetError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), DatasetError> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<Result<_, _>>()
            .map_err(io_err(dir))?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let bytes = fs::read(&p).map_err(io_err(&p))?;
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.insert(rel, hex::encode(Sha256::digest(&bytes)));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}
