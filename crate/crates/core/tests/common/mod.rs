//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use rigshift::category::Category;
use rigshift::image::RgbImage;
use rigshift::metrics::{Detection, GtBox};

/// Runs the CLI and returns (exit code, stdout).
pub fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["rigshift"];
    argv.extend_from_slice(args);
    let code = rigshift::cli::run(argv, &mut out);
    (code, String::from_utf8(out).expect("utf-8 output"))
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Precision envelope integrated exactly: between consecutive recall
/// breakpoints the envelope is constant, so it is evaluated by a full scan of
/// operating points at each interval midpoint.
pub fn reference_ap(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, f) in flags.iter().enumerate() {
        if *f {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let envelope = |r: f64| {
        let p = points.iter().filter(|(pr, _)| *pr >= r).map(|(_, pp)| *pp).fold(0.0, f64::max);
        if p >= 0.1 {
            p
        } else {
            0.0
        }
    };
    let mut cuts: Vec<f64> = points.iter().map(|p| p.0).filter(|r| *r > 0.1 && *r < 1.0).collect();
    cuts.push(0.1);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let area: f64 = cuts.windows(2).map(|w| (w[1] - w[0]) * envelope(0.5 * (w[0] + w[1]))).sum();
    Some(area / 0.9)
}

/// Greedy matching by a full scan per prediction. Returns the TP flags in
/// rank order and the distances of true positives.
pub fn reference_match(preds: &[Detection], gts: &[GtBox], class: Category, threshold: f64) -> (Vec<bool>, Vec<f64>, usize) {
    let mut ranked: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].category == class).collect();
    // insertion sort keeps equal scores in input order
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && preds[ranked[j - 1]].score < preds[ranked[j]].score {
            ranked.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::new();
    let mut dists = Vec::new();
    for &pi in &ranked {
        let p = &preds[pi];
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.category != class || g.sample_token != p.sample_token {
                continue;
            }
            let dx = p.translation[0] - g.translation[0];
            let dy = p.translation[1] - g.translation[1];
            let d = (dx * dx + dy * dy).sqrt();
            if d <= threshold && d < best_d {
                best = Some(gi);
                best_d = d;
            }
        }
        match best {
            Some(gi) => {
                used[gi] = true;
                flags.push(true);
                dists.push(best_d);
            }
            None => flags.push(false),
        }
    }
    let n_gt = gts.iter().filter(|g| g.category == class).count();
    (flags, dists, n_gt)
}

/// (mAP, mATE) with the same aggregation rules as the library.
pub fn reference_eval(preds: &[Detection], gts: &[GtBox], thresholds: &[f64]) -> (f64, f64) {
    let mut aps = Vec::new();
    let mut ates = Vec::new();
    for class in Category::ALL {
        for &t in thresholds {
            let (flags, _, n_gt) = reference_match(preds, gts, class, t);
            aps.extend(reference_ap(&flags, n_gt));
        }
        let (_, dists, n_gt) = reference_match(preds, gts, class, 2.0);
        if n_gt > 0 {
            ates.push(if dists.is_empty() {
                1.0
            } else {
                dists.iter().sum::<f64>() / dists.len() as f64
            });
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&aps), mean(&ates))
}

/// SSIM straight from the definition: an explicit 11x11 Gaussian window at
/// every valid position over BT.601 luma.
pub fn reference_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let luma = |img: &RgbImage, x: usize, y: usize| {
        let p = img.pixel(x, y);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut kernel = [[0.0f64; 11]; 11];
    let mut sum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(di * di + dj * dj) / 4.5).exp();
            sum += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=a.height - 11 {
        for x0 in 0..=a.width - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / sum;
                    let (p, q) = (luma(a, x0 + j, y0 + i), luma(b, x0 + j, y0 + i));
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
