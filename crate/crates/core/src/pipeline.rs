//! Scene loading, quality gating and whole-dataset rig adaptation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::dataset::{self, CalibratedSensorRecord, DatasetError, DatasetTables, LIDAR_CHANNEL};
use crate::fields::checkpoint::{self, CheckpointError};
use crate::fields::SceneModel;
use crate::geometry::{shift_rig, ActorTrack, Camera, GeometryError, Pose, Rig, RigShift};
use crate::image::{Mask, RgbImage};
use crate::metrics::{psnr, ssim, MetricsError};
use crate::renderer::train::{train_scene, LidarSweep, LossRow, TrainConfig, TrainingScene, TrainingView};
use crate::renderer::{render_image, RenderError, RenderSettings};
use crate::worldgen::{camera_sensor_token, WorldConfig};

pub const NERF_SUV_SPLIT: &str = "nerf-SUV";
pub const NERF_SUB_SPLIT: &str = "nerf-SUB";
pub const MANIFEST_FILE: &str = "adaptation.json";
/// Name given to the shifted rig; it also seeds the shifted sensor tokens.
pub const TARGET_RIG_NAME: &str = "SUB";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no scene named `{0}`")]
    UnknownScene(String),
    #[error("scene `{scene}`: {reason}")]
    Scene { scene: String, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Minimum mean quality of held-out original-view renders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    #[serde(with = "psnr_serde")]
    pub psnr_min: f64,
    pub ssim_min: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            psnr_min: 20.0,
            ssim_min: 0.6,
        }
    }
}

impl GateConfig {
    pub fn passes(&self, mean_psnr: f64, mean_ssim: f64) -> bool {
        mean_psnr >= self.psnr_min && mean_ssim >= self.ssim_min
    }
}

/// How the scene bounds are derived from the captured data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Sideways and downward padding around lidar hits and camera centers.
    pub pad: f64,
    /// Upward padding.
    pub top_pad: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { pad: 1.0, top_pad: 2.0 }
    }
}

/// Everything configurable, as read from one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub gate: GateConfig,
    pub scene: SceneConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// One sample of a loaded scene.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub index: usize,
    pub sample_token: String,
    pub time: f64,
    pub is_key_frame: bool,
    /// Ego pose of the lidar sweep; used for channels without their own.
    pub ego_pose: Pose,
    pub camera_ego_poses: BTreeMap<String, Pose>,
}

impl SceneFrame {
    pub fn ego_pose_for(&self, channel: &str) -> &Pose {
        self.camera_ego_poses.get(channel).unwrap_or(&self.ego_pose)
    }
}

/// A scene read back from a dataset split, ready for training.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub name: String,
    pub rig: Rig,
    pub frames: Vec<SceneFrame>,
    pub training: TrainingScene,
}

/// Source camera rig of a split: one camera per channel, sorted by channel.
pub fn rig_from_tables(tables: &DatasetTables, name: &str) -> Result<Rig, PipelineError> {
    let sensors: BTreeMap<&str, &CalibratedSensorRecord> =
        tables.calibrated_sensor.iter().map(|c| (c.token.as_str(), c)).collect();
    let mut cameras: BTreeMap<String, Camera> = BTreeMap::new();
    for sd in &tables.sample_data {
        let rec = sensors[sd.calibrated_sensor_token.as_str()];
        let cam = rec.to_camera(sd.width, sd.height)?;
        match cameras.get(&cam.channel) {
            Some(existing) if *existing != cam => {
                return Err(PipelineError::Config(format!(
                    "channel {} has more than one calibration",
                    cam.channel
                )))
            }
            Some(_) => {}
            None => {
                cameras.insert(cam.channel.clone(), cam);
            }
        }
    }
    let rig = Rig {
        name: name.to_string(),
        cameras: cameras.into_values().collect(),
    };
    rig.validate()?;
    Ok(rig)
}

fn micros_to_seconds(ts: i64, origin: i64) -> f64 {
    (ts - origin) as f64 * 1e-6
}

/// Reads scene `name` (or the first scene) of the split at `root`.
pub fn load_scene(root: &Path, name: Option<&str>, config: &SceneConfig) -> Result<LoadedScene, PipelineError> {
    let tables = dataset::read_tables(root)?;
    load_scene_from(root, &tables, name, config)
}

pub fn load_scene_from(
    root: &Path,
    tables: &DatasetTables,
    name: Option<&str>,
    config: &SceneConfig,
) -> Result<LoadedScene, PipelineError> {
    let scene = match name {
        Some(n) => tables.scene.iter().find(|s| s.name == n),
        None => tables.scene.iter().min_by(|a, b| a.name.cmp(&b.name)),
    }
    .ok_or_else(|| PipelineError::UnknownScene(name.unwrap_or("<any>").to_string()))?;
    let fail = |reason: String| PipelineError::Scene {
        scene: scene.name.clone(),
        reason,
    };
    let samples = tables.scene_samples(scene);
    let origin = samples.first().ok_or_else(|| fail("scene has no samples".into()))?.timestamp;
    let poses: BTreeMap<&str, &dataset::EgoPoseRecord> = tables.ego_pose.iter().map(|p| (p.token.as_str(), p)).collect();
    let sensors: BTreeMap<&str, &CalibratedSensorRecord> =
        tables.calibrated_sensor.iter().map(|c| (c.token.as_str(), c)).collect();
    let index: BTreeMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (s.token.as_str(), i)).collect();

    let scene_data: Vec<&dataset::SampleDataRecord> = tables
        .sample_data
        .iter()
        .filter(|sd| index.contains_key(sd.sample_token.as_str()))
        .collect();
    let scene_tables = DatasetTables {
        sample_data: scene_data.iter().map(|sd| (*sd).clone()).collect(),
        calibrated_sensor: tables.calibrated_sensor.clone(),
        ..DatasetTables::default()
    };
    let rig = rig_from_tables(&scene_tables, "source")?;

    let mut frames = Vec::with_capacity(samples.len());
    let mut lidar = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let ego = poses[s.lidar_ego_pose_token.as_str()].pose()?;
        let sensor = sensors[s.lidar_sensor_token.as_str()];
        if sensor.channel != LIDAR_CHANNEL {
            return Err(fail(format!("sample {} points at a non-lidar sensor", s.token)));
        }
        let origin_world = ego.compose(&sensor.pose()?).translation_array();
        let data: Vec<&&dataset::SampleDataRecord> =
            scene_data.iter().filter(|sd| sd.sample_token == s.token).collect();
        let is_key_frame = data.iter().any(|sd| sd.is_key_frame);
        let mut camera_ego_poses = BTreeMap::new();
        for sd in &data {
            camera_ego_poses.insert(sd.channel.clone(), poses[sd.ego_pose_token.as_str()].pose()?);
        }
        let time = micros_to_seconds(s.timestamp, origin);
        lidar.push(LidarSweep {
            frame: i,
            is_key_frame,
            time,
            origin: origin_world,
            points: dataset::read_xyz(&root.join(&s.lidar_filename))?,
        });
        frames.push(SceneFrame {
            index: i,
            sample_token: s.token.clone(),
            time,
            is_key_frame,
            ego_pose: ego,
            camera_ego_poses,
        });
    }

    let loaded: Vec<TrainingView> = scene_data
        .par_iter()
        .map(|sd| -> Result<TrainingView, PipelineError> {
            let frame = &frames[index[sd.sample_token.as_str()]];
            let camera = rig.camera(&sd.channel).expect("rig built from these records").clone();
            Ok(TrainingView {
                frame: frame.index,
                is_key_frame: sd.is_key_frame,
                time: micros_to_seconds(sd.timestamp, origin),
                camera,
                ego_pose: poses[sd.ego_pose_token.as_str()].pose()?,
                image: dataset::read_ppm(&root.join(&sd.filename))?,
                sky_mask: dataset::read_pgm(&root.join(&sd.sky_mask_filename))?,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut views = loaded;
    views.sort_by(|a, b| (a.frame, &a.camera.channel).cmp(&(b.frame, &b.camera.channel)));

    let tracks = tracks_from_annotations(tables, &index, &samples, origin)?;
    let scene_aabb = TrainingScene::bounds_from_data(&views, &lidar, config.pad, config.top_pad)
        .ok_or_else(|| fail("no lidar points or cameras to bound".into()))?;
    let time_range = (0.0, frames.last().map_or(0.0, |f| f.time));
    Ok(LoadedScene {
        name: scene.name.clone(),
        rig,
        frames,
        training: TrainingScene {
            views,
            lidar,
            tracks,
            scene_aabb,
            time_range,
        },
    })
}

/// One track per annotated instance; sizes go from (w, l, h) to (l, w, h).
fn tracks_from_annotations(
    tables: &DatasetTables,
    index: &BTreeMap<&str, usize>,
    samples: &[&dataset::SampleRecord],
    origin: i64,
) -> Result<Vec<ActorTrack>, PipelineError> {
    let mut by_instance: BTreeMap<&str, Vec<&dataset::SampleAnnotationRecord>> = BTreeMap::new();
    for a in &tables.sample_annotation {
        if index.contains_key(a.sample_token.as_str()) {
            by_instance.entry(a.instance_token.as_str()).or_default().push(a);
        }
    }
    let mut tracks = Vec::with_capacity(by_instance.len());
    for (instance, mut anns) in by_instance {
        anns.sort_by_key(|a| index[a.sample_token.as_str()]);
        let first = anns[0];
        let class_name: Category = first
            .category
            .parse()
            .map_err(|e: crate::category::UnknownCategory| PipelineError::Config(e.to_string()))?;
        let keyframes = anns
            .iter()
            .map(|a| {
                let t = micros_to_seconds(samples[index[a.sample_token.as_str()]].timestamp, origin);
                Pose::from_wxyz(a.rotation, a.translation).map(|p| (t, p))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let track = ActorTrack {
            actor_id: instance.to_string(),
            class_name,
            size: [first.size[1], first.size[0], first.size[2]],
            keyframes,
        };
        track.validate()?;
        tracks.push(track);
    }
    Ok(tracks)
}

/// A rendered camera image at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub channel: String,
    pub frame: usize,
    pub image: RgbImage,
    /// Pixels whose composited opacity is below one half.
    pub sky: Mask,
}

/// Renders every camera of `rig` at the given frames of `scene`.
pub fn render_views(
    model: &SceneModel<f32>,
    scene: &LoadedScene,
    rig: &Rig,
    frames: &[usize],
    settings: &RenderSettings,
) -> Result<Vec<RenderedView>, PipelineError> {
    let mut out = Vec::with_capacity(frames.len() * rig.cameras.len());
    for &f in frames {
        let frame = &scene.frames[f];
        for cam in &rig.cameras {
            let r = render_image(model, cam, frame.ego_pose_for(&cam.channel), frame.time, settings)?;
            let (w, h) = (r.rgb.width, r.rgb.height);
            let factor = w / r.feature_width;
            let mut sky = Mask::new(w, h);
            for y in 0..h {
                for x in 0..w {
                    sky.set(x, y, r.opacity[(y / factor) * r.feature_width + x / factor] < 0.5);
                }
            }
            out.push(RenderedView {
                channel: cam.channel.clone(),
                frame: f,
                image: r.rgb,
                sky,
            });
        }
    }
    Ok(out)
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Finite(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityEntry {
    pub channel: String,
    pub frame: usize,
    /// Infinite for a pixel-perfect render; stored as the string "inf".
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Held-out original-view image quality and the gate verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub entries: Vec<QualityEntry>,
    #[serde(with = "psnr_serde")]
    pub mean_psnr: f64,
    #[serde(with = "psnr_serde")]
    pub min_psnr: f64,
    pub mean_ssim: f64,
    pub min_ssim: f64,
    pub gate: GateConfig,
    pub pass: bool,
}

impl QualityReport {
    pub fn new(entries: Vec<QualityEntry>, gate: GateConfig) -> Result<Self, PipelineError> {
        if entries.is_empty() {
            return Err(PipelineError::Config("no held-out views to assess".into()));
        }
        let n = entries.len() as f64;
        let mean_psnr = entries.iter().map(|e| e.psnr).sum::<f64>() / n;
        let mean_ssim = entries.iter().map(|e| e.ssim).sum::<f64>() / n;
        let min_psnr = entries.iter().map(|e| e.psnr).fold(f64::INFINITY, f64::min);
        let min_ssim = entries.iter().map(|e| e.ssim).fold(f64::INFINITY, f64::min);
        Ok(Self {
            pass: gate.passes(mean_psnr, mean_ssim),
            entries,
            mean_psnr,
            min_psnr,
            mean_ssim,
            min_ssim,
            gate,
        })
    }

    /// Scores renders against the captured images of the same views.
    pub fn assess(scene: &LoadedScene, renders: &[RenderedView], gate: GateConfig) -> Result<Self, PipelineError> {
        let entries = renders
            .iter()
            .map(|r| {
                let view = scene
                    .training
                    .views
                    .iter()
                    .find(|v| v.frame == r.frame && v.camera.channel == r.channel)
                    .ok_or_else(|| PipelineError::Config(format!("no captured view {} frame {}", r.channel, r.frame)))?;
                Ok(QualityEntry {
                    channel: r.channel.clone(),
                    frame: r.frame,
                    psnr: psnr(&r.image, &view.image)?,
                    ssim: ssim(&r.image, &view.image)?,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Self::new(entries, gate)
    }

    /// Applies another gate to the stored aggregates.
    pub fn regate(&self, gate: GateConfig) -> bool {
        gate.passes(self.mean_psnr, self.mean_ssim)
    }
}

/// Result of adapting one scene.
#[derive(Debug, Clone)]
pub struct SceneAdaptation {
    pub model: SceneModel<f32>,
    pub log: Vec<LossRow>,
    /// Original-rig renders of every frame.
    pub original: Vec<RenderedView>,
    pub report: QualityReport,
    /// Target-rig renders of every frame; `None` when the gate failed.
    pub novel: Option<Vec<RenderedView>>,
}

/// Trains on the non-key frames, gates on the key frames, then renders the
/// target rig.
pub fn adapt_scene(scene: &LoadedScene, target: &Rig, config: &PipelineConfig) -> Result<SceneAdaptation, PipelineError> {
    if config.train.iterations == 0 {
        return Err(PipelineError::Config("adaptation needs at least one training iteration".into()));
    }
    let (model, log) = train_scene(&scene.training, &config.train)?;
    adapt_trained(scene, model, log, target, config)
}

/// [`adapt_scene`] for an already trained model.
pub fn adapt_trained(
    scene: &LoadedScene,
    model: SceneModel<f32>,
    log: Vec<LossRow>,
    target: &Rig,
    config: &PipelineConfig,
) -> Result<SceneAdaptation, PipelineError> {
    let settings = config.train.eval_settings();
    let all: Vec<usize> = (0..scene.frames.len()).collect();
    let original = render_views(&model, scene, &scene.rig, &all, &settings)?;
    let held_out: Vec<RenderedView> = original
        .iter()
        .filter(|r| scene.frames[r.frame].is_key_frame)
        .cloned()
        .collect();
    let report = QualityReport::assess(scene, &held_out, config.gate)?;
    let novel = if report.pass {
        Some(render_views(&model, scene, target, &all, &settings)?)
    } else {
        None
    };
    Ok(SceneAdaptation {
        model,
        log,
        original,
        report,
        novel,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trained,
    Gated,
    Rendered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStatus {
    Rendered,
    GateFailed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene: String,
    pub status: SceneStatus,
    /// Stages reached, in order.
    pub stages: Vec<Stage>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<QualityReport>,
    pub error: Option<String>,
}

impl SceneEntry {
    /// Stages must be a prefix of trained, gated, rendered and agree with the
    /// status.
    pub fn is_consistent(&self) -> bool {
        let order = [Stage::Trained, Stage::Gated, Stage::Rendered];
        if self.stages.len() > order.len() || self.stages[..] != order[..self.stages.len()] {
            return false;
        }
        match self.status {
            SceneStatus::Rendered => self.stages.len() == 3 && self.report.as_ref().is_some_and(|r| r.pass),
            SceneStatus::GateFailed => self.stages.len() == 2 && self.report.as_ref().is_some_and(|r| !r.pass),
            SceneStatus::Failed => self.error.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationManifest {
    pub source: PathBuf,
    pub shift: RigShift,
    pub target_rig: Rig,
    pub nerf_suv: PathBuf,
    pub nerf_sub: PathBuf,
    pub scenes: Vec<SceneEntry>,
}

impl AdaptationManifest {
    pub fn all_rendered(&self) -> bool {
        self.scenes.iter().all(|s| s.status == SceneStatus::Rendered)
    }
}

/// Side-by-side render | capture strip for offline inspection.
fn side_by_side(a: &RgbImage, b: &RgbImage) -> RgbImage {
    let mut out = RgbImage::new(a.width + b.width, a.height.max(b.height));
    for y in 0..a.height {
        for x in 0..a.width {
            out.set_pixel(x, y, a.pixel(x, y));
        }
    }
    for y in 0..b.height {
        for x in 0..b.width {
            out.set_pixel(a.width + x, y, b.pixel(x, y));
        }
    }
    out
}

fn write_renders(
    root: &Path,
    tables: &DatasetTables,
    scene: &LoadedScene,
    renders: &[RenderedView],
) -> Result<(), PipelineError> {
    let token_of: BTreeMap<usize, &str> = scene.frames.iter().map(|f| (f.index, f.sample_token.as_str())).collect();
    for r in renders {
        let sd = tables
            .sample_data
            .iter()
            .find(|sd| sd.sample_token == token_of[&r.frame] && sd.channel == r.channel)
            .ok_or_else(|| PipelineError::Config(format!("no sample_data for {} frame {}", r.channel, r.frame)))?;
        dataset::write_ppm(&root.join(&sd.filename), &r.image)?;
        dataset::write_pgm(&root.join(&sd.sky_mask_filename), &r.sky)?;
    }
    Ok(())
}

/// Restricts the tables to the given scenes.
fn keep_scenes(tables: &DatasetTables, scenes: &BTreeSet<String>) -> DatasetTables {
    let scene_tokens: BTreeSet<&str> = tables
        .scene
        .iter()
        .filter(|s| scenes.contains(&s.name))
        .map(|s| s.token.as_str())
        .collect();
    let samples: BTreeSet<&str> = tables
        .sample
        .iter()
        .filter(|s| scene_tokens.contains(s.scene_token.as_str()))
        .map(|s| s.token.as_str())
        .collect();
    let sample_data: Vec<_> = tables
        .sample_data
        .iter()
        .filter(|sd| samples.contains(sd.sample_token.as_str()))
        .cloned()
        .collect();
    let kept_samples: Vec<_> = tables
        .sample
        .iter()
        .filter(|s| samples.contains(s.token.as_str()))
        .cloned()
        .collect();
    let used_poses: BTreeSet<&str> = sample_data
        .iter()
        .map(|sd| sd.ego_pose_token.as_str())
        .chain(kept_samples.iter().map(|s| s.lidar_ego_pose_token.as_str()))
        .collect();
    let used_sensors: BTreeSet<&str> = sample_data
        .iter()
        .map(|sd| sd.calibrated_sensor_token.as_str())
        .chain(kept_samples.iter().map(|s| s.lidar_sensor_token.as_str()))
        .collect();
    DatasetTables {
        scene: tables.scene.iter().filter(|s| scene_tokens.contains(s.token.as_str())).cloned().collect(),
        ego_pose: tables.ego_pose.iter().filter(|p| used_poses.contains(p.token.as_str())).cloned().collect(),
        calibrated_sensor: tables
            .calibrated_sensor
            .iter()
            .filter(|c| used_sensors.contains(c.token.as_str()))
            .cloned()
            .collect(),
        sample_annotation: tables
            .sample_annotation
            .iter()
            .filter(|a| samples.contains(a.sample_token.as_str()))
            .cloned()
            .collect(),
        category: tables.category.clone(),
        sample: kept_samples,
        sample_data,
    }
}

/// Swaps every camera calibration for the matching camera of `rig`.
pub fn retarget_tables(tables: &DatasetTables, rig: &Rig) -> Result<DatasetTables, PipelineError> {
    let mut out = tables.clone();
    let old: BTreeMap<String, String> = tables
        .calibrated_sensor
        .iter()
        .filter(|c| c.channel != LIDAR_CHANNEL)
        .map(|c| (c.token.clone(), c.channel.clone()))
        .collect();
    out.calibrated_sensor.retain(|c| !old.contains_key(&c.token));
    let mut added = BTreeSet::new();
    for sd in &mut out.sample_data {
        let channel = &old[&sd.calibrated_sensor_token];
        let cam = rig
            .camera(channel)
            .ok_or_else(|| PipelineError::Config(format!("target rig has no {channel}")))?;
        let token = camera_sensor_token(rig, channel);
        if added.insert(token.clone()) {
            out.calibrated_sensor.push(CalibratedSensorRecord::camera(token.clone(), cam));
        }
        sd.calibrated_sensor_token = token;
        sd.width = cam.intrinsics.width;
        sd.height = cam.intrinsics.height;
    }
    Ok(out)
}

/// Adapts every scene of the split at `src`, writing `nerf-SUV` (original
/// rig renders) and `nerf-SUB` (shifted rig renders) under `out`. Scenes
/// that fail are recorded in the manifest and left out of both splits.
pub fn adapt_dataset(
    src: &Path,
    shift: RigShift,
    out: &Path,
    config: &PipelineConfig,
) -> Result<AdaptationManifest, PipelineError> {
    let tables = dataset::read_tables(src)?;
    let source_rig = rig_from_tables(&tables, "source")?;
    let mut target_rig = shift_rig(&source_rig, shift)?;
    target_rig.name = TARGET_RIG_NAME.to_string();
    let suv_root = out.join(NERF_SUV_SPLIT);
    let sub_root = out.join(NERF_SUB_SPLIT);
    let mut names: Vec<String> = tables.scene.iter().map(|s| s.name.clone()).collect();
    names.sort();

    let mut entries = Vec::with_capacity(names.len());
    let mut done = BTreeSet::new();
    let mut outputs = Vec::new();
    for name in &names {
        let mut entry = SceneEntry {
            scene: name.clone(),
            status: SceneStatus::Failed,
            stages: vec![],
            checkpoint: None,
            report: None,
            error: None,
        };
        let result = load_scene_from(src, &tables, Some(name), &config.scene)
            .and_then(|scene| adapt_scene(&scene, &target_rig, config).map(|a| (scene, a)));
        match result {
            Err(e) => entry.error = Some(e.to_string()),
            Ok((scene, a)) => {
                let ckpt = out.join("checkpoints").join(format!("{name}.ckpt"));
                checkpoint::save(&a.model, &ckpt)?;
                let log_path = out.join("logs").join(format!("{name}.csv"));
                std::fs::create_dir_all(out.join("logs"))
                    .and_then(|_| crate::renderer::train::write_log_csv(&a.log, &log_path))
                    .map_err(|e| DatasetError::Io {
                        path: log_path.clone(),
                        source: e,
                    })?;
                for r in a.original.iter().filter(|r| scene.frames[r.frame].is_key_frame) {
                    let capture = &scene
                        .training
                        .views
                        .iter()
                        .find(|v| v.frame == r.frame && v.camera.channel == r.channel)
                        .expect("assessed views exist")
                        .image;
                    let path = out.join("inspection").join(name).join(format!("{}_{:03}.ppm", r.channel, r.frame));
                    dataset::write_ppm(&path, &side_by_side(&r.image, capture))?;
                }
                entry.checkpoint = Some(ckpt);
                entry.stages = vec![Stage::Trained, Stage::Gated];
                entry.report = Some(a.report.clone());
                if a.novel.is_some() {
                    entry.stages.push(Stage::Rendered);
                    entry.status = SceneStatus::Rendered;
                    done.insert(name.clone());
                    outputs.push((scene, a));
                } else {
                    entry.status = SceneStatus::GateFailed;
                }
            }
        }
        entries.push(entry);
    }

    let suv_tables = keep_scenes(&tables, &done);
    let sub_tables = retarget_tables(&suv_tables, &target_rig)?;
    for (scene, a) in &outputs {
        write_renders(&suv_root, &suv_tables, scene, &a.original)?;
        write_renders(&sub_root, &sub_tables, scene, a.novel.as_deref().unwrap_or_default())?;
    }
    for s in &suv_tables.sample {
        for root in [&suv_root, &sub_root] {
            dataset::copy_file(&src.join(&s.lidar_filename), &root.join(&s.lidar_filename))?;
        }
    }
    dataset::write_tables(&suv_tables, &suv_root)?;
    dataset::write_tables(&sub_tables, &sub_root)?;

    let manifest = AdaptationManifest {
        source: src.to_path_buf(),
        shift,
        target_rig,
        nerf_suv: suv_root,
        nerf_sub: sub_root,
        scenes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    dataset::write_file(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}
