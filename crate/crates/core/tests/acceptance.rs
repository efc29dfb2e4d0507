//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//! Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cli, path_str, reference_eval, reference_ssim};
use rigshift::category::Category;
use rigshift::dataset::{self, tree_digest};
use rigshift::geometry::{shift_rig, Ray, Rig, RigShift};
use rigshift::image::RgbImage;
use rigshift::metrics::{self, evaluate_boxes, psnr, ssim, Detection, GtBox, MatrixManifest, DISTANCE_THRESHOLDS};
use rigshift::pipeline::{AdaptationManifest, NERF_SUB_SPLIT, NERF_SUV_SPLIT};
use rigshift::renderer::{composite, geometry_to_alpha, sample_ray};
use rigshift::worldgen::{SUB_SPLIT, SUV_SPLIT};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml")
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let outcomes = rigshift::gradcheck::run_all().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = outcomes
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .ok_or("no gates ran")?;
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{}/{}={:.2e}", o.operation, o.group, o.report.max_rel_error))
        .collect();
    let ops: std::collections::BTreeSet<&str> = outcomes.iter().map(|o| o.operation).collect();
    check(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks over {:?}, worst {:.2e} ({}/{}), {:.1}s{}",
            outcomes.len(),
            ops,
            worst.report.max_rel_error,
            worst.operation,
            worst.group,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

fn c2_compositing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut occluder_ok = true;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..64);
        let mut alphas: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3)).collect();
        let occluder = rng.gen_bool(0.3).then(|| rng.gen_range(0..n));
        if let Some(k) = occluder {
            alphas[k] = 1.0;
        }
        let features: Vec<f64> = (0..n * 3).map(|_| rng.gen()).collect();
        let ts: Vec<f64> = (0..n).map(|i| 0.5 + i as f64).collect();
        let c = composite(&alphas, &features, &[0.2, 0.4, 0.9], &ts, 100.0);
        let total: f64 = c.weights.iter().sum::<f64>() + c.t_res;
        worst = worst.max((total - 1.0).abs());
        if let Some(k) = occluder {
            occluder_ok &= c.t_res == 0.0 && c.weights[k + 1..].iter().all(|w| *w == 0.0);
        }
    }
    check(
        worst < 1e-6 && occluder_ok,
        format!("10^4 rays, max |sum w + T - 1| = {worst:.2e}, occluder exact: {occluder_ok}"),
    )
}

fn c3_slab() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (sigma, len) in [(0.5f64, 2.0f64), (2.0, 0.75), (0.1, 8.0)] {
        let (near, far, n) = (0.0, 4.0 * len, 256);
        let s = sigma.exp_m1().ln();
        let ray = Ray::new(Vector3::zeros(), Vector3::x(), near, far);
        let ts = sample_ray(&ray, n, 1, 0);
        let delta = (far - near) / n as f64;
        let alphas: Vec<f64> = ts
            .iter()
            .map(|t| if *t >= len && *t < 2.0 * len { geometry_to_alpha(s, delta) } else { 0.0 })
            .collect();
        let opacity = composite(&alphas, &vec![0.0; n], &[0.0], &ts, far).opacity();
        let expect = 1.0 - (-sigma * len).exp();
        ok &= (opacity - expect).abs() < 1e-3;
        lines.push(format!("(s={sigma},L={len}) err {:.1e}", (opacity - expect).abs()));
    }
    check(ok, lines.join(", "))
}

fn c4_rig_shift() -> Outcome {
    let suv = Rig::default_suv();
    let sub = shift_rig(&suv, RigShift { dz: 0.50, d_long: 0.90, d_lat: 0.20 }).map_err(|e| e.to_string())?;
    let span = |rig: &Rig, axis: usize| {
        let v: Vec<f64> = rig.cameras.iter().map(|c| c.pose_in_ego.translation[axis]).collect();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let mut worst_dz: f64 = 0.0;
    let mut intrinsics_equal = suv.cameras.len() == sub.cameras.len();
    for (a, b) in suv.cameras.iter().zip(&sub.cameras) {
        worst_dz = worst_dz.max((b.pose_in_ego.translation.z - a.pose_in_ego.translation.z + 0.5).abs());
        let bits = |k: &rigshift::geometry::CameraIntrinsics| {
            [k.fx.to_bits(), k.fy.to_bits(), k.cx.to_bits(), k.cy.to_bits(), k.width as u64, k.height as u64]
        };
        intrinsics_equal &= a.channel == b.channel && bits(&a.intrinsics) == bits(&b.intrinsics);
    }
    let dlong = span(&suv, 0) - span(&sub, 0);
    let dlat = span(&suv, 1) - span(&sub, 1);
    check(
        worst_dz < 1e-12 && (dlong - 0.9).abs() < 1e-12 && (dlat - 0.2).abs() < 1e-12 && intrinsics_equal,
        format!(
            "height err {worst_dz:.1e}, front-rear closed {dlong:.15}, left-right closed {dlat:.15}, intrinsics identical {intrinsics_equal}"
        ),
    )
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GtBox>) {
    let samples = ["s0", "s1", "s2"];
    let classes: Vec<Category> = Category::ALL.to_vec();
    let n_gt = rng.gen_range(0..=10);
    let n_pred = rng.gen_range(0..=20);
    let gts: Vec<GtBox> = (0..n_gt)
        .map(|_| GtBox {
            sample_token: samples[rng.gen_range(0..3)].to_string(),
            category: classes[rng.gen_range(0..classes.len())],
            translation: [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), 0.8],
        })
        .collect();
    let preds = (0..n_pred)
        .map(|_| {
            let (sample, category, base) = if !gts.is_empty() && rng.gen_bool(0.7) {
                let g = &gts[rng.gen_range(0..gts.len())];
                let category = if rng.gen_bool(0.85) { g.category } else { classes[rng.gen_range(0..classes.len())] };
                (g.sample_token.clone(), category, g.translation)
            } else {
                (samples[rng.gen_range(0..3)].to_string(), classes[rng.gen_range(0..classes.len())], [0.0, 0.0, 0.8])
            };
            // a quarter of the scores collide to exercise rank ties
            let score = if rng.gen_bool(0.25) { 0.5 } else { rng.gen_range(0.0..1.0) };
            Detection {
                sample_token: sample,
                category,
                translation: [base[0] + rng.gen_range(-3.0..3.0), base[1] + rng.gen_range(-3.0..3.0), 0.8],
                size: [1.9, 4.5, 1.6],
                yaw: 0.0,
                score,
            }
        })
        .collect();
    (preds, gts)
}

fn c5_metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut worst_map, mut worst_mate): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let (preds, gts) = random_instance(&mut rng);
        let s = evaluate_boxes(&preds, &gts, &Category::ALL, &DISTANCE_THRESHOLDS);
        let (map, mate) = reference_eval(&preds, &gts, &DISTANCE_THRESHOLDS);
        worst_map = worst_map.max((s.map - map).abs());
        worst_mate = worst_mate.max((s.mate - mate).abs());
    }
    // every prediction sits (0.375, 0.5) away from its box: a 0.625 m error
    let gts: Vec<GtBox> = (0..6)
        .map(|i| GtBox {
            sample_token: format!("s{}", i % 2),
            category: Category::ALL[i % 3],
            translation: [i as f64 * 8.0, -(i as f64) * 4.0, 0.8],
        })
        .collect();
    let preds: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            sample_token: g.sample_token.clone(),
            category: g.category,
            translation: [g.translation[0] + 0.375, g.translation[1] + 0.5, g.translation[2]],
            size: [1.9, 4.5, 1.6],
            yaw: 0.0,
            score: 0.9,
        })
        .collect();
    let offset = evaluate_boxes(&preds, &gts, &Category::ALL, &DISTANCE_THRESHOLDS).mate;
    check(
        worst_map < 1e-6 && worst_mate < 1e-6 && offset == 0.625,
        format!("50 instances, max |dmAP| {worst_map:.1e}, max |dmATE| {worst_mate:.1e}, offset mATE {offset}"),
    )
}

fn c6_image_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut random = |w: usize, h: usize| RgbImage {
        width: w,
        height: h,
        data: (0..w * h * 3).map(|_| rng.gen()).collect(),
    };
    let a = random(40, 30);
    let self_ssim = ssim(&a, &a).map_err(|e| e.to_string())?;
    let p = psnr(&RgbImage::filled(16, 16, [0.0; 3]), &RgbImage::filled(16, 16, [0.5; 3])).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = random(24, 18);
        let noise = random(24, 18);
        let y = RgbImage {
            data: x.data.iter().zip(&noise.data).map(|(v, e)| 0.6 * v + 0.4 * e).collect(),
            ..x.clone()
        };
        let fast = ssim(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((fast - reference_ssim(&x, &y)).abs());
    }
    check(
        (self_ssim - 1.0).abs() < 1e-9 && (p - 6.0206).abs() < 1e-3 && worst < 1e-9,
        format!("self SSIM {self_ssim:.12}, PSNR {p:.5} dB, SSIM vs per-window {worst:.1e}"),
    )
}

struct Generated {
    root: PathBuf,
}

fn generate(out: &Path) -> Result<(), String> {
    let (code, _) = cli(&["generate", "--seed", "42", "--out", path_str(out), "--config", path_str(&desk_config())]);
    if code == 0 {
        Ok(())
    } else {
        Err(format!("generate exited {code}"))
    }
}

fn c7_dual_rig(work: &Path) -> Outcome {
    let first = work.join("gen-a");
    let second = work.join("gen-b");
    generate(&first)?;
    generate(&second)?;
    let digest = |p: &Path| tree_digest(p).map_err(|e| e.to_string());
    let same_hash = digest(&first)? == digest(&second)?;
    let read = |p: PathBuf| std::fs::read(p).map_err(|e| e.to_string());
    let ann_equal = read(first.join(SUV_SPLIT).join("v1.0/sample_annotation.json"))?
        == read(first.join(SUB_SPLIT).join("v1.0/sample_annotation.json"))?;
    let mut per_sample_ok = true;
    let mut validate_ok = true;
    for split in [SUV_SPLIT, SUB_SPLIT] {
        let t = dataset::read_tables(&first.join(split)).map_err(|e| e.to_string())?;
        for s in &t.sample {
            per_sample_ok &= t.sample_data.iter().filter(|sd| sd.sample_token == s.token).count() == 6;
        }
        validate_ok &= cli(&["validate", "--root", path_str(&first.join(split))]).0 == 0;
    }
    check(
        same_hash && ann_equal && per_sample_ok && validate_ok,
        format!(
            "annotations identical {ann_equal}, 6 sample_data per sample {per_sample_ok}, validate exit 0 {validate_ok}, two runs hash-equal {same_hash}"
        ),
    )
}

fn mean_psnr_on_key_frames(a_root: &Path, b_root: &Path) -> Result<(f64, usize), String> {
    let t = dataset::read_tables(a_root).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    let mut n = 0;
    for sd in t.sample_data.iter().filter(|sd| sd.is_key_frame) {
        let a = dataset::read_ppm(&a_root.join(&sd.filename)).map_err(|e| e.to_string())?;
        let b = dataset::read_ppm(&b_root.join(&sd.filename)).map_err(|e| e.to_string())?;
        total += psnr(&a, &b).map_err(|e| e.to_string())?;
        n += 1;
    }
    Ok((total / n as f64, n))
}

fn c8_end_to_end(work: &Path, generated: &Generated) -> Outcome {
    let start = Instant::now();
    let out = work.join("adapted");
    let src = generated.root.join(SUV_SPLIT);
    let (code, _) = cli(&["adapt", "--src", path_str(&src), "--out", path_str(&out), "--config", path_str(&desk_config())]);
    let manifest: AdaptationManifest = serde_json::from_str(
        &std::fs::read_to_string(out.join(rigshift::pipeline::MANIFEST_FILE)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let scene = manifest.scenes.first().ok_or("no scenes in manifest")?;
    let report = scene.report.as_ref().ok_or_else(|| format!("scene failed: {:?}", scene.error))?;
    let log = std::fs::read_to_string(out.join("logs").join(format!("{}.csv", scene.scene))).map_err(|e| e.to_string())?;
    let totals: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().and_then(|v| v.parse().ok()).ok_or("bad log line"))
        .collect::<Result<_, _>>()?;
    let (first, last) = (totals[0], *totals.last().ok_or("empty log")?);
    let original = report.mean_psnr;
    let (novel, n_novel) = if out.join(NERF_SUB_SPLIT).join("v1.0").exists() && manifest.all_rendered() {
        mean_psnr_on_key_frames(&out.join(NERF_SUB_SPLIT), &generated.root.join(SUB_SPLIT))?
    } else {
        (f64::NAN, 0)
    };
    let (eval_code, _) = cli(&["eval-images", "--a", path_str(&out.join(NERF_SUB_SPLIT)), "--b", path_str(&generated.root.join(SUB_SPLIT))]);
    let elapsed = start.elapsed();
    check(
        code == 0 && eval_code == 0 && last < 0.25 * first && original >= 20.0 && novel >= 16.0 && novel <= original,
        format!(
            "{} iterations, loss {first:.4} -> {last:.4} ({:.1}%), original PSNR {original:.2} dB (SSIM {:.3}), novel PSNR {novel:.2} dB over {n_novel} views, adapt exit {code}, eval-images exit {eval_code}, {:.0}s on {} threads",
            totals.len(),
            100.0 * last / first,
            report.mean_ssim,
            elapsed.as_secs_f64(),
            rayon::current_num_threads()
        ),
    )
}

fn c9_matrix(work: &Path, generated: &Generated) -> Outcome {
    let adapted = work.join("adapted");
    let nerf = |split: &str, fallback: &str| {
        let p = adapted.join(split);
        if p.join("v1.0").exists() {
            p
        } else {
            generated.root.join(fallback)
        }
    };
    let roots = [
        ('a', generated.root.join(SUV_SPLIT)),
        ('b', generated.root.join(SUB_SPLIT)),
        ('c', nerf(NERF_SUV_SPLIT, SUV_SPLIT)),
        ('d', nerf(NERF_SUB_SPLIT, SUB_SPLIT)),
    ];
    let dir = work.join("matrix");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let tables = dataset::read_tables(&roots[0].1).map_err(|e| e.to_string())?;
    let perfect = metrics::detections_from_annotations(&tables, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let kept: Vec<&Detection> = perfect.iter().filter(|_| rng.gen_bool(0.8)).collect();
    let perturbed: Vec<Detection> = kept
        .into_iter()
        .map(|d| Detection {
            translation: [d.translation[0] + rng.gen_range(-1.0..1.0), d.translation[1] + rng.gen_range(-1.0..1.0), d.translation[2]],
            score: rng.gen_range(0.1..1.0),
            ..d.clone()
        })
        .collect();
    let write = |name: &str, d: &[Detection]| std::fs::write(dir.join(name), serde_json::to_string(d).expect("serializes"));
    write("perfect.json", &perfect).map_err(|e| e.to_string())?;
    write("perturbed.json", &perturbed).map_err(|e| e.to_string())?;
    let perfect_cells = ["Aa", "Bb", "Cc", "Dd"];
    let manifest = MatrixManifest {
        val_roots: roots.iter().map(|(c, p)| (c.to_string(), p.clone())).collect(),
        cells: metrics::EVALUATED_CELLS
            .iter()
            .map(|c| {
                let f = if perfect_cells.contains(c) { "perfect.json" } else { "perturbed.json" };
                (c.to_string(), PathBuf::from(f))
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("serializes")).map_err(|e| e.to_string())?;
    let (code, csv) = cli(&["matrix", "--manifest", path_str(&manifest_path), "--svg", path_str(&dir.join("matrix.svg"))]);
    let mx = metrics::experiment_matrix(&manifest, &dir).map_err(|e| e.to_string())?;
    let filled: Vec<&String> = mx.cells.keys().collect();
    let mask_ok = filled == metrics::EVALUATED_CELLS.iter().map(|c| c.to_string()).collect::<Vec<_>>().iter().collect::<Vec<_>>();
    let na = csv.lines().skip(2).take(4).map(|l| l.matches("n/a").count()).sum::<usize>();
    let perfect_ok = perfect_cells.iter().all(|c| mx.cells[*c].map == 1.0 && mx.cells[*c].mate == 0.0);
    let perturbed_map: BTreeMap<&str, f64> = ["Ab", "Ba", "Ca", "Db"].iter().map(|c| (*c, mx.cells[*c].map)).collect();
    check(
        code == 0 && mask_ok && na == 8 && perfect_ok,
        format!("filled {filled:?}, n/a cells {na}, perfect cells 1.0/0.0 {perfect_ok}, perturbed mAP {perturbed_map:?}"),
    )
}

fn c10_determinism(work: &Path, generated: &Generated) -> Outcome {
    let cfg = work.join("short.toml");
    std::fs::write(&cfg, "[train]\niterations = 15\nrays_per_batch = 256\nlidar_rays_per_batch = 64\nseed = 7\n").map_err(|e| e.to_string())?;
    let src = generated.root.join(SUV_SPLIT);
    let mut bytes = Vec::new();
    for name in ["one.ckpt", "two.ckpt"] {
        let path = work.join(name);
        let (code, _) = cli(&["train", "--scene", path_str(&src), "--out", path_str(&path), "--config", path_str(&cfg)]);
        if code != 0 {
            return Err(format!("train exited {code}"));
        }
        bytes.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    let ckpt_equal = bytes[0] == bytes[1];
    let again = work.join("gen-c");
    generate(&again)?;
    let data_equal = tree_digest(&again).map_err(|e| e.to_string())? == tree_digest(&generated.root).map_err(|e| e.to_string())?;
    check(
        ckpt_equal && data_equal,
        format!("checkpoints bit-identical {ckpt_equal} ({} bytes), datasets bit-identical {data_equal}", bytes[0].len()),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(d) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s]: {d}"),
        Err(d) => println!("criterion {id:>2} FAIL  {name} [{secs:.1}s]: {d}"),
    }
    result.is_ok()
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let generated = Generated {
        root: work.path().join("gen-a"),
    };
    let results = [
        run(1, "gradient master gate", c1_gradients),
        run(2, "compositing conservation", c2_compositing),
        run(3, "slab transmittance", c3_slab),
        run(4, "rig shift exactness", c4_rig_shift),
        run(5, "metrics oracle equivalence", c5_metrics_oracle),
        run(6, "SSIM/PSNR", c6_image_metrics),
        run(7, "dual-rig dataset integrity", || c7_dual_rig(work.path())),
        run(8, "end-to-end desk adaptation", || c8_end_to_end(work.path(), &generated)),
        run(9, "experiment matrix", || c9_matrix(work.path(), &generated)),
        run(10, "determinism", || c10_determinism(work.path(), &generated)),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
