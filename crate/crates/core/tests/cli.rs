mod common;

use std::path::{Path, PathBuf};

use common::{cli, path_str};
use rigshift::cli::{EXIT_GATE, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
use rigshift::dataset;
use rigshift::metrics::{self, Detection, EvalSummary};
use rigshift::pipeline::{AdaptationManifest, SceneStatus, MANIFEST_FILE, NERF_SUB_SPLIT, NERF_SUV_SPLIT};
use rigshift::worldgen::{SUB_SPLIT, SUV_SPLIT};

const TINY: &str = "[world]
frames = 6
holdout_every = 3
holdout_offset = 1
actor_count = 2

[train]
iterations = 4
rays_per_batch = 64
lidar_rays_per_batch = 16
samples_per_ray = 12
";

fn tiny_dataset(dir: &Path, gate: &str) -> (PathBuf, PathBuf) {
    let config = dir.join("tiny.toml");
    std::fs::write(&config, format!("{TINY}\n{gate}")).unwrap();
    let out = dir.join("data");
    let (code, _) = cli(&["generate", "--seed", "3", "--out", path_str(&out), "--config", path_str(&config)]);
    assert_eq!(code, EXIT_OK);
    (out, config)
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(cli(&["generate", "--bogus"]).0, EXIT_USAGE);
    assert_eq!(cli(&["no-such-command"]).0, EXIT_USAGE);
    assert_eq!(cli(&["generate", "--out", "x", "--shift", "0.5,abc,0"]).0, EXIT_USAGE);
    let (code, text) = cli(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for sub in ["generate", "train", "render", "adapt", "eval-images", "eval-dets", "matrix", "validate"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn generated_splits_validate_and_broken_ones_do_not() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = tiny_dataset(dir.path(), "");
    for split in [SUV_SPLIT, SUB_SPLIT] {
        let (code, text) = cli(&["validate", "--root", path_str(&data.join(split))]);
        assert_eq!(code, EXIT_OK, "{text}");
    }
    let tables = dataset::read_tables(&data.join(SUV_SPLIT)).unwrap();
    std::fs::remove_file(data.join(SUV_SPLIT).join(&tables.sample_data[0].filename)).unwrap();
    let (code, text) = cli(&["validate", "--root", path_str(&data.join(SUV_SPLIT))]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(text.contains(&tables.sample_data[0].filename));
}

#[test]
fn eval_dets_scores_annotations_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = tiny_dataset(dir.path(), "");
    let root = data.join(SUB_SPLIT);
    let tables = dataset::read_tables(&root).unwrap();
    let preds = dir.path().join("preds.json");
    for (dx, map) in [(0.0, 1.0), (5.0, 0.0)] {
        let d: Vec<Detection> = metrics::detections_from_annotations(&tables, dx);
        std::fs::write(&preds, serde_json::to_string(&d).unwrap()).unwrap();
        let (code, text) = cli(&["eval-dets", "--preds", path_str(&preds), "--gt", path_str(&root)]);
        assert_eq!(code, EXIT_OK);
        let s: EvalSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(s.map, map);
    }
}

#[test]
fn matrix_lists_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, r#"{"val_roots": {}, "cells": {"Aa": "p.json", "Dd": "p.json"}}"#).unwrap();
    let (code, _) = cli(&["matrix", "--manifest", path_str(&manifest)]);
    assert_eq!(code, EXIT_VALIDATION);
    let err = metrics::check_cells(&metrics::load_matrix_manifest(&manifest).unwrap()).unwrap_err().to_string();
    for cell in ["Ab", "Ba", "Bb", "Ca", "Cc", "Db"] {
        assert!(err.contains(cell), "{err}");
    }
}

#[test]
fn train_render_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = tiny_dataset(dir.path(), "");
    let ckpt = dir.path().join("m.ckpt");
    let src = data.join(SUV_SPLIT);
    let (code, _) = cli(&["train", "--scene", path_str(&src), "--out", path_str(&ckpt), "--config", path_str(&config)]);
    assert_eq!(code, EXIT_OK);
    let log = std::fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);

    let renders = dir.path().join("renders");
    let (code, _) = cli(&[
        "render", "--checkpoint", path_str(&ckpt), "--scene", path_str(&src), "--shift", "0.5,0.9,0.2",
        "--out", path_str(&renders), "--config", path_str(&config),
    ]);
    assert_eq!(code, EXIT_OK);
    let front: Vec<_> = std::fs::read_dir(renders.join("CAM_FRONT")).unwrap().collect();
    assert_eq!(front.len(), 6);

    let (code, text) = cli(&["eval-images", "--a", path_str(&src), "--b", path_str(&data.join(SUB_SPLIT)), "--key-frames"]);
    assert_eq!(code, EXIT_OK);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "image,psnr,ssim");
    assert_eq!(lines.len(), 1 + 2 * 6 + 1);
    assert!(lines.last().unwrap().starts_with("mean,"));
}

#[test]
fn adapt_exit_codes_follow_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = tiny_dataset(dir.path(), "[gate]\npsnr_min = -inf\nssim_min = -1.0\n");
    let out = dir.path().join("open");
    let (code, text) = cli(&["adapt", "--src", path_str(&data.join(SUV_SPLIT)), "--out", path_str(&out), "--config", path_str(&config)]);
    assert_eq!(code, EXIT_OK, "{text}");
    for split in [NERF_SUV_SPLIT, NERF_SUB_SPLIT] {
        assert_eq!(cli(&["validate", "--root", path_str(&out.join(split))]).0, EXIT_OK);
    }

    let strict = dir.path().join("strict.toml");
    std::fs::write(&strict, format!("{TINY}\n[gate]\npsnr_min = inf\n")).unwrap();
    let out = dir.path().join("closed");
    let (code, _) = cli(&["adapt", "--src", path_str(&data.join(SUV_SPLIT)), "--out", path_str(&out), "--config", path_str(&strict)]);
    assert_eq!(code, EXIT_GATE);
    let m: AdaptationManifest = serde_json::from_str(&std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert!(m.scenes.iter().all(|s| s.status == SceneStatus::GateFailed && s.is_consistent()));
}
