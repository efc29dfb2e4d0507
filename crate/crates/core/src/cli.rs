//! Command-line front end. `run` returns the process exit code: 0 success,
//! 1 usage error, 2 validation or runtime failure, 3 quality-gate failure.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use crate::dataset;
use crate::fields::checkpoint;
use crate::geometry::{shift_rig, Rig, RigShift};
use crate::metrics::{self, psnr, ssim, DISTANCE_THRESHOLDS};
use crate::pipeline::{self, PipelineConfig, SceneStatus};
use crate::renderer::train::{train_scene, write_log_csv};
use crate::worldgen::{export_scenes, generate_world};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_GATE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rigshift", version, about = "Camera-rig adaptation for multi-camera driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dual-rig dataset (sim-SUV and sim-SUB splits).
    Generate {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline TOML; only the [world] table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Source rig TOML; the bundled SUV rig when absent.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Mounting change dz,d_long,d_lat in meters.
        #[arg(long, default_value = "0.5,0.9,0.2")]
        shift: RigShift,
        /// Number of scenes; scene i uses seed + i.
        #[arg(long, default_value_t = 1)]
        scenes: usize,
    },
    /// Train one scene and write a checkpoint plus a loss log beside it.
    Train {
        /// Dataset split root.
        #[arg(long)]
        scene: PathBuf,
        /// Scene name; the first scene when absent.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render every frame of a scene through a rig from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split root supplying ego poses and timestamps.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// Rig TOML; the scene's own rig when absent.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Optional mounting change applied to the rig.
        #[arg(long)]
        shift: Option<RigShift>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Adapt a split to a shifted rig, writing nerf-SUV and nerf-SUB.
    Adapt {
        #[arg(long)]
        src: PathBuf,
        #[arg(long, default_value = "0.5,0.9,0.2")]
        shift: RigShift,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// PSNR and SSIM between matching camera images of two splits.
    EvalImages {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Only frames flagged as key frames in split `a`.
        #[arg(long)]
        key_frames: bool,
    },
    /// Detection mAP and mATE against a split's annotations.
    EvalDets {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Fill the cross-rig experiment matrix from a manifest.
    Matrix {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the mAP matrix as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Check a split's tables and referenced files.
    Validate {
        #[arg(long)]
        root: PathBuf,
    },
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Exit(i32, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

/// Parses `argv` (program name first), runs the command, and returns the
/// exit code. Normal output goes to `out`, diagnostics to stderr.
pub fn run<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = e.print();
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(EXIT_VALIDATION, |x| x.0);
            eprintln!("error: {e:#}");
            code
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> anyhow::Result<()> {
    match command {
        Command::Generate {
            seed,
            out: dir,
            config,
            rig,
            shift,
            scenes,
        } => {
            let config = load_config(&config)?;
            let rig = match rig {
                Some(p) => Rig::load(&p)?,
                None => Rig::default_suv(),
            };
            if scenes == 0 {
                bail!("--scenes must be at least 1");
            }
            let frames: Vec<usize> = (0..config.world.frames).collect();
            let worlds = (0..scenes)
                .map(|i| Ok((generate_world(seed + i as u64, &config.world)?, frames.clone())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let e = export_scenes(&worlds, &rig, shift, &dir)?;
            writeln!(out, "{}\n{}", e.suv_root.display(), e.sub_root.display())?;
        }
        Command::Train {
            scene,
            name,
            out: ckpt,
            config,
        } => {
            let config = load_config(&config)?;
            let loaded = pipeline::load_scene(&scene, name.as_deref(), &config.scene)?;
            let (model, log) = train_scene(&loaded.training, &config.train)?;
            checkpoint::save(&model, &ckpt)?;
            let log_path = ckpt.with_extension("csv");
            write_log_csv(&log, &log_path).with_context(|| log_path.display().to_string())?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                writeln!(
                    out,
                    "{}: {} iterations, loss {:.6} -> {:.6}",
                    loaded.name,
                    log.len(),
                    first.report.total,
                    last.report.total
                )?;
            }
        }
        Command::Render {
            checkpoint: ckpt,
            scene,
            name,
            rig,
            shift,
            out: dir,
            config,
        } => {
            let config = load_config(&config)?;
            let model = checkpoint::load(&ckpt)?;
            let loaded = pipeline::load_scene(&scene, name.as_deref(), &config.scene)?;
            let mut rig = match rig {
                Some(p) => Rig::load(&p)?,
                None => loaded.rig.clone(),
            };
            if let Some(s) = shift {
                rig = shift_rig(&rig, s)?;
            }
            let frames: Vec<usize> = (0..loaded.frames.len()).collect();
            let views = pipeline::render_views(&model, &loaded, &rig, &frames, &config.train.eval_settings())?;
            for v in &views {
                let stem = format!("{}_{:03}", loaded.name, v.frame);
                dataset::write_ppm(&dir.join(&v.channel).join(format!("{stem}.ppm")), &v.image)?;
            }
            writeln!(out, "rendered {} views to {}", views.len(), dir.display())?;
        }
        Command::Adapt {
            src,
            shift,
            out: dir,
            config,
        } => {
            let config = load_config(&config)?;
            let m = pipeline::adapt_dataset(&src, shift, &dir, &config)?;
            for s in &m.scenes {
                let quality = s
                    .report
                    .as_ref()
                    .map(|r| format!("psnr {:.2} ssim {:.3}", r.mean_psnr, r.mean_ssim))
                    .unwrap_or_default();
                writeln!(out, "{} {:?} {quality}", s.scene, s.status)?;
            }
            if m.scenes.iter().any(|s| s.status == SceneStatus::Failed) {
                return Err(Exit(EXIT_VALIDATION, "some scenes failed to adapt".into()).into());
            }
            if !m.all_rendered() {
                return Err(Exit(EXIT_GATE, "some scenes failed the quality gate".into()).into());
            }
        }
        Command::EvalImages { a, b, key_frames } => eval_images(&a, &b, key_frames, out)?,
        Command::EvalDets { preds, gt } => {
            let tables = dataset::read_tables(&gt)?;
            let p = metrics::read_predictions(&preds)?;
            let s = metrics::evaluate(&p, &tables, &crate::category::Category::ALL, &DISTANCE_THRESHOLDS)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&s)?)?;
        }
        Command::Matrix { manifest, svg } => {
            let m = metrics::load_matrix_manifest(&manifest)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let mx = match metrics::experiment_matrix(&m, base) {
                Err(e @ metrics::MetricsError::MissingCells(_)) => return Err(Exit(EXIT_VALIDATION, e.to_string()).into()),
                other => other?,
            };
            writeln!(out, "mAP\n{}\nmATE\n{}", mx.to_csv(), mx.to_csv_mate())?;
            if let Some(p) = svg {
                dataset::write_file(&p, mx.to_svg().as_bytes())?;
            }
        }
        Command::Validate { root } => {
            let tables = dataset::read_tables_unchecked(&root)?;
            let mut problems: Vec<String> = dataset::validate(&tables).iter().map(|i| i.to_string()).collect();
            let files: BTreeSet<&str> = tables
                .sample_data
                .iter()
                .flat_map(|sd| [sd.filename.as_str(), sd.sky_mask_filename.as_str()])
                .chain(tables.sample.iter().map(|s| s.lidar_filename.as_str()))
                .collect();
            problems.extend(
                files
                    .into_iter()
                    .filter(|f| !root.join(f).is_file())
                    .map(|f| format!("missing file {f}")),
            );
            if problems.is_empty() {
                writeln!(
                    out,
                    "ok: {} scenes, {} samples, {} sample_data, {} annotations",
                    tables.scene.len(),
                    tables.sample.len(),
                    tables.sample_data.len(),
                    tables.sample_annotation.len()
                )?;
            } else {
                for p in &problems {
                    writeln!(out, "{p}")?;
                }
                return Err(Exit(EXIT_VALIDATION, format!("{} problems", problems.len())).into());
            }
        }
    }
    Ok(())
}

fn eval_images(a: &Path, b: &Path, key_frames: bool, out: &mut dyn Write) -> anyhow::Result<()> {
    let ta = dataset::read_tables(a)?;
    let tb = dataset::read_tables(b)?;
    let in_b: BTreeSet<&str> = tb.sample_data.iter().map(|sd| sd.filename.as_str()).collect();
    let mut pairs: Vec<&str> = ta
        .sample_data
        .iter()
        .filter(|sd| !key_frames || sd.is_key_frame)
        .map(|sd| sd.filename.as_str())
        .filter(|f| in_b.contains(f))
        .collect();
    pairs.sort();
    if pairs.is_empty() {
        return Err(Exit(EXIT_VALIDATION, "no camera images in common".into()).into());
    }
    writeln!(out, "image,psnr,ssim")?;
    let (mut sp, mut ss) = (0.0, 0.0);
    for f in &pairs {
        let ia = dataset::read_ppm(&a.join(f))?;
        let ib = dataset::read_ppm(&b.join(f))?;
        let (p, s) = (psnr(&ia, &ib)?, ssim(&ia, &ib)?);
        sp += p;
        ss += s;
        writeln!(out, "{f},{p:.4},{s:.4}")?;
    }
    let n = pairs.len() as f64;
    writeln!(out, "mean,{:.4},{:.4}", sp / n, ss / n)?;
    Ok(())
}
