//! Image-quality metrics (PSNR, SSIM), center-distance detection metrics
//! (AP, mAP, mATE) and the cross-sensor experiment matrix.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::dataset::{self, DatasetError, DatasetTables};
use crate::image::RgbImage;

pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold whose true positives define the translation error.
pub const ATE_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
/// Window side and standard deviation of the SSIM Gaussian.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall(usize, usize),
    #[error("invalid detection {index}: {reason}")]
    InvalidDetection { index: usize, reason: String },
    #[error("prediction {index} references unknown sample `{token}`")]
    UnknownSample { index: usize, token: String },
    #[error("malformed predictions file {path}: {reason}")]
    Predictions { path: PathBuf, reason: String },
    #[error("missing required cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),
    #[error("cells not evaluated in the scheme: {}", .0.join(", "))]
    NotEvaluated(Vec<String>),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(MetricsError::Shape(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in [0, 1]. Identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Rec. 601 luma.
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Mean SSIM over every full 11x11 window of the luma channel.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(w, h));
    }
    let (ya, yb) = (luma(a), luma(b));
    let g = gaussian_taps();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // separable filtering of the five moment images: rows, then columns
    let signals: [Vec<f64>; 5] = [
        ya.clone(),
        yb.clone(),
        ya.iter().map(|v| v * v).collect(),
        yb.iter().map(|v| v * v).collect(),
        ya.iter().zip(&yb).map(|(p, q)| p * q).collect(),
    ];
    let filtered: Vec<Vec<f64>> = signals
        .iter()
        .map(|s| {
            let mut rows = vec![0.0; h * ow];
            for y in 0..h {
                for x in 0..ow {
                    rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * s[y * w + x + k]).sum();
                }
            }
            let mut out = vec![0.0; oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
                }
            }
            out
        })
        .collect();
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (filtered[0][i], filtered[1][i]);
        let va = filtered[2][i] - ma * ma;
        let vb = filtered[3][i] - mb * mb;
        let cov = filtered[4][i] - ma * mb;
        total += ssim_window(ma, mb, va, vb, cov);
    }
    Ok(total / (oh * ow) as f64)
}

/// SSIM of one window from its moments.
pub fn ssim_window(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// One predicted box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub sample_token: String,
    pub category: Category,
    pub translation: [f64; 3],
    /// (width, length, height) in meters.
    pub size: [f64; 3],
    pub yaw: f64,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self, index: usize) -> Result<(), MetricsError> {
        let bad = |reason: &str| {
            Err(MetricsError::InvalidDetection {
                index,
                reason: reason.to_string(),
            })
        };
        if !(0.0..=1.0).contains(&self.score) {
            return bad("score must lie in [0, 1]");
        }
        if self.size.iter().any(|s| !(*s > 0.0)) {
            return bad("size must be positive");
        }
        if self.translation.iter().any(|v| !v.is_finite()) || !self.yaw.is_finite() {
            return bad("pose must be finite");
        }
        Ok(())
    }
}

/// A ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub sample_token: String,
    pub category: Category,
    pub translation: [f64; 3],
}

/// Ground-truth boxes of every annotation with a known class.
pub fn gt_boxes(tables: &DatasetTables) -> Vec<GtBox> {
    let mut anns: Vec<&dataset::SampleAnnotationRecord> = tables.sample_annotation.iter().collect();
    anns.sort_by(|a, b| a.token.cmp(&b.token));
    anns.into_iter()
        .filter_map(|a| {
            Some(GtBox {
                sample_token: a.sample_token.clone(),
                category: a.category.parse().ok()?,
                translation: a.translation,
            })
        })
        .collect()
}

/// Ground-plane distance between box centers.
pub fn center_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// (prediction index, ground-truth index, center distance).
    pub matches: Vec<(usize, usize, f64)>,
    /// Class predictions in descending score order: (index, score, is TP).
    pub ranked: Vec<(usize, f64, bool)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub n_gt: usize,
}

/// Greedy center-distance matching for one class: predictions by
/// descending score (ties in input order) take the nearest unmatched
/// ground truth of the same sample within `threshold` (ties to the lower
/// ground-truth index).
pub fn match_detections(preds: &[Detection], gts: &[GtBox], class: Category, threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).filter(|i| preds[*i].category == class).collect();
    order.sort_by(|a, b| preds[*b].score.total_cmp(&preds[*a].score));
    let mut by_sample: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut n_gt = 0;
    for (i, g) in gts.iter().enumerate() {
        if g.category == class {
            by_sample.entry(g.sample_token.as_str()).or_default().push(i);
            n_gt += 1;
        }
    }
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult {
        n_gt,
        ..MatchResult::default()
    };
    for pi in order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_sample.get(p.sample_token.as_str()).map(|v| v.as_slice()).unwrap_or(&[]) {
            if taken[gi] {
                continue;
            }
            let d = center_distance(&p.translation, &gts[gi].translation);
            if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((gi, d));
            }
        }
        match best {
            Some((gi, d)) => {
                taken[gi] = true;
                out.matches.push((pi, gi, d));
                out.ranked.push((pi, p.score, true));
            }
            None => {
                out.unmatched_preds.push(pi);
                out.ranked.push((pi, p.score, false));
            }
        }
    }
    out.unmatched_gts = (0..gts.len()).filter(|i| gts[*i].category == class && !taken[*i]).collect();
    out
}

/// Average precision of a ranked TP/FP list: the area under the monotone
/// precision envelope over recall in [min_recall, 1], with envelope values
/// below `min_precision` counted as zero, divided by (1 - min_recall).
///
/// `None` when there is no ground truth and no prediction.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize, min_recall: f64, min_precision: f64) -> Option<f64> {
    if n_gt == 0 {
        return if ranked_tp.is_empty() { None } else { Some(0.0) };
    }
    // operating points (recall, precision)
    let mut points = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, is_tp) in ranked_tp.iter().enumerate() {
        tp += *is_tp as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // envelope: running max of precision from the highest recall down
    let mut env = vec![0.0; points.len()];
    let mut run: f64 = 0.0;
    for k in (0..points.len()).rev() {
        run = run.max(points[k].1);
        env[k] = run;
    }
    // p_env(r) for r in (r_{k-1}, r_k] equals env at the first point with recall >= r
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev_r {
            let lo = prev_r.max(min_recall);
            let hi = r.min(1.0);
            if hi > lo {
                let p = if env[k] >= min_precision { env[k] } else { 0.0 };
                area += p * (hi - lo);
            }
            prev_r = r;
        }
    }
    Some(area / (1.0 - min_recall))
}

/// Per-class results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    /// (threshold meters, AP); AP is absent for a class without ground truth
    /// or predictions.
    pub ap: Vec<(f64, Option<f64>)>,
    /// Mean translation error of the true positives at the 2 m threshold.
    pub ate: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_class: BTreeMap<Category, ClassSummary>,
    pub map: f64,
    pub mate: f64,
}

/// Detection metrics of `preds` against the annotations in `gt`.
///
/// mAP averages AP over every (class, threshold) pair with a defined AP.
/// mATE averages per-class ATE over classes with ground truth; a class with
/// ground truth but no true positive contributes 1.0.
pub fn evaluate(
    preds: &[Detection],
    gt: &DatasetTables,
    classes: &[Category],
    thresholds: &[f64],
) -> Result<EvalSummary, MetricsError> {
    let samples: HashSet<&str> = gt.sample.iter().map(|s| s.token.as_str()).collect();
    for (i, p) in preds.iter().enumerate() {
        p.validate(i)?;
        if !samples.contains(p.sample_token.as_str()) {
            return Err(MetricsError::UnknownSample {
                index: i,
                token: p.sample_token.clone(),
            });
        }
    }
    Ok(evaluate_boxes(preds, &gt_boxes(gt), classes, thresholds))
}

/// [`evaluate`] on pre-extracted ground truth; predictions are assumed valid.
pub fn evaluate_boxes(preds: &[Detection], gts: &[GtBox], classes: &[Category], thresholds: &[f64]) -> EvalSummary {
    let mut per_class = BTreeMap::new();
    let mut aps = Vec::new();
    let mut ates = Vec::new();
    for &class in classes {
        let ap: Vec<(f64, Option<f64>)> = thresholds
            .iter()
            .map(|&d| {
                let m = match_detections(preds, gts, class, d);
                let flags: Vec<bool> = m.ranked.iter().map(|r| r.2).collect();
                (d, average_precision(&flags, m.n_gt, MIN_RECALL, MIN_PRECISION))
            })
            .collect();
        aps.extend(ap.iter().filter_map(|a| a.1));
        let m = match_detections(preds, gts, class, ATE_THRESHOLD);
        let ate = if m.n_gt == 0 {
            None
        } else if m.matches.is_empty() {
            Some(1.0)
        } else {
            Some(m.matches.iter().map(|x| x.2).sum::<f64>() / m.matches.len() as f64)
        };
        ates.extend(ate);
        per_class.insert(
            class,
            ClassSummary {
                ap,
                ate,
                tp: m.matches.len(),
                fp: m.unmatched_preds.len(),
                fn_: m.unmatched_gts.len(),
            },
        );
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    EvalSummary {
        per_class,
        map: mean(&aps),
        mate: mean(&ates),
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<Detection>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Predictions {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| MetricsError::Predictions {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Training splits (rows) and validation splits (columns) of the matrix.
pub const SPLITS: [&str; 4] = ["sim-SUV", "sim-SUB", "nerf-SUV", "nerf-SUB"];
pub const ROWS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const COLS: [char; 4] = ['a', 'b', 'c', 'd'];
/// The evaluated cells; every other cell is n/a.
pub const EVALUATED_CELLS: [&str; 8] = ["Aa", "Ab", "Ba", "Bb", "Ca", "Cc", "Db", "Dd"];

/// Manifest mapping each cell to a predictions file and each validation
/// column to the split root holding its ground truth. Relative paths are
/// resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub val_roots: BTreeMap<String, PathBuf>,
    pub cells: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    /// Keyed by cell name such as "Ab"; n/a cells are absent.
    pub cells: BTreeMap<String, EvalSummary>,
}

impl ExperimentMatrix {
    pub fn cell(&self, row: char, col: char) -> Option<&EvalSummary> {
        self.cells.get(&format!("{row}{col}"))
    }

    fn csv_with(&self, value: impl Fn(&EvalSummary) -> f64) -> String {
        let mut out = String::from("split,a,b,c,d\n");
        for row in ROWS {
            out.push(row);
            for col in COLS {
                match self.cell(row, col) {
                    Some(s) => write!(out, ",{:.4}", value(s)).expect("string write"),
                    None => out.push_str(",n/a"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// mAP per cell.
    pub fn to_csv(&self) -> String {
        self.csv_with(|s| s.map)
    }

    /// mATE per cell.
    pub fn to_csv_mate(&self) -> String {
        self.csv_with(|s| s.mate)
    }

    /// Radar chart of mAP with one axis per evaluated cell.
    pub fn to_svg(&self) -> String {
        let (cx, cy, r) = (200.0, 200.0, 150.0);
        let n = EVALUATED_CELLS.len();
        let at = |i: usize, v: f64| {
            let a = std::f64::consts::TAU * i as f64 / n as f64 - std::f64::consts::FRAC_PI_2;
            (cx + r * v * a.cos(), cy + r * v * a.sin())
        };
        let mut s = String::from(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\" viewBox=\"0 0 400 400\">\n",
        );
        for ring in [0.25, 0.5, 0.75, 1.0] {
            let pts: Vec<String> = (0..n)
                .map(|i| {
                    let (x, y) = at(i, ring);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            writeln!(s, "<polygon points=\"{}\" fill=\"none\" stroke=\"#ccc\"/>", pts.join(" ")).expect("string write");
        }
        for (i, cell) in EVALUATED_CELLS.iter().enumerate() {
            let (x, y) = at(i, 1.0);
            let (lx, ly) = at(i, 1.12);
            writeln!(s, "<line x1=\"{cx}\" y1=\"{cy}\" x2=\"{x:.2}\" y2=\"{y:.2}\" stroke=\"#999\"/>").expect("string write");
            writeln!(
                s,
                "<text x=\"{lx:.2}\" y=\"{ly:.2}\" font-size=\"14\" text-anchor=\"middle\">{cell}</text>"
            )
            .expect("string write");
        }
        let pts: Vec<String> = EVALUATED_CELLS
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let v = self.cells.get(*c).map_or(0.0, |e| e.map.clamp(0.0, 1.0));
                let (x, y) = at(i, v);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            s,
            "<polygon points=\"{}\" fill=\"#3b7dd8\" fill-opacity=\"0.35\" stroke=\"#3b7dd8\"/>",
            pts.join(" ")
        )
        .expect("string write");
        s.push_str("</svg>\n");
        s
    }
}

/// Checks a manifest's cells against the evaluation mask.
pub fn check_cells(manifest: &MatrixManifest) -> Result<(), MetricsError> {
    let extra: Vec<String> = manifest
        .cells
        .keys()
        .filter(|k| !EVALUATED_CELLS.contains(&k.as_str()))
        .cloned()
        .collect();
    if !extra.is_empty() {
        return Err(MetricsError::NotEvaluated(extra));
    }
    let missing: Vec<String> = EVALUATED_CELLS
        .iter()
        .filter(|c| !manifest.cells.contains_key(**c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingCells(missing));
    }
    Ok(())
}

/// Evaluates every cell of the scheme.
pub fn experiment_matrix(manifest: &MatrixManifest, base_dir: &Path) -> Result<ExperimentMatrix, MetricsError> {
    check_cells(manifest)?;
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
    let mut gts: BTreeMap<char, DatasetTables> = BTreeMap::new();
    for cell in EVALUATED_CELLS {
        let col = cell.chars().nth(1).expect("two-letter cell");
        if gts.contains_key(&col) {
            continue;
        }
        let root = manifest
            .val_roots
            .get(&col.to_string())
            .ok_or_else(|| MetricsError::Manifest(format!("no val_roots entry for column `{col}`")))?;
        gts.insert(col, dataset::read_tables(&resolve(root))?);
    }
    let mut cells = BTreeMap::new();
    for cell in EVALUATED_CELLS {
        let col = cell.chars().nth(1).expect("two-letter cell");
        let preds = read_predictions(&resolve(&manifest.cells[cell]))?;
        let summary = evaluate(&preds, &gts[&col], &Category::ALL, &DISTANCE_THRESHOLDS)?;
        cells.insert(cell.to_string(), summary);
    }
    Ok(ExperimentMatrix { cells })
}

pub fn load_matrix_manifest(path: &Path) -> Result<MatrixManifest, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Manifest(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| MetricsError::Manifest(format!("{}: {e}", path.display())))
}

/// Detections equal to the annotations of `tables` (score 1), optionally
/// shifted in x.
pub fn detections_from_annotations(tables: &DatasetTables, dx: f64) -> Vec<Detection> {
    let mut anns: Vec<&dataset::SampleAnnotationRecord> = tables.sample_annotation.iter().collect();
    anns.sort_by(|a, b| a.token.cmp(&b.token));
    anns.into_iter()
        .filter_map(|a| {
            let pose = crate::geometry::Pose::from_wxyz(a.rotation, a.translation).ok()?;
            Some(Detection {
                sample_token: a.sample_token.clone(),
                category: a.category.parse().ok()?,
                translation: [a.translation[0] + dx, a.translation[1], a.translation[2]],
                size: a.size,
                yaw: pose.yaw(),
                score: 1.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
