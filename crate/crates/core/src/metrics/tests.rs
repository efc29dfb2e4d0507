use super::*;
use crate::dataset::tests::tiny_tables;
use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage {
        width: w,
        height: h,
        data: (0..w * h * 3).map(|_| rng.gen()).collect(),
    }
}

#[test]
fn psnr_closed_forms() {
    let a = random_image(8, 6, 1);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    let zero = RgbImage::filled(8, 6, [0.0; 3]);
    let half = RgbImage::filled(8, 6, [0.5; 3]);
    let v = psnr(&zero, &half).unwrap();
    assert!((v - 10.0 * 4f64.log10()).abs() < 1e-12);
    assert!((v - 6.0206).abs() < 1e-3);
    assert!(matches!(psnr(&zero, &RgbImage::new(6, 8)), Err(MetricsError::Shape(..))));
}

#[test]
fn psnr_is_symmetric() {
    for seed in 0..20 {
        let (a, b) = (random_image(7, 5, seed), random_image(7, 5, seed + 100));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let base = RgbImage::filled(32, 32, [0.5; 3]);
    let noise = random_image(32, 32, 9);
    let values: Vec<f64> = [0.05f32, 0.1, 0.2]
        .iter()
        .map(|amp| {
            let mut n = base.clone();
            for (v, e) in n.data.iter_mut().zip(&noise.data) {
                *v += amp * (2.0 * e - 1.0);
            }
            psnr(&base, &n).unwrap()
        })
        .collect();
    assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
}

#[test]
fn ssim_of_identical_images_is_one() {
    let a = random_image(20, 16, 3);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    assert!(matches!(ssim(&RgbImage::new(10, 20), &RgbImage::new(10, 20)), Err(MetricsError::TooSmall(10, 20))));
}

#[test]
fn inverted_checker_is_anticorrelated() {
    let mut a = RgbImage::new(16, 16);
    for y in 0..16 {
        for x in 0..16 {
            let v = ((x + y) % 2) as f32;
            a.set_pixel(x, y, [v; 3]);
        }
    }
    let inv = RgbImage {
        data: a.data.iter().map(|v| 1.0 - v).collect(),
        ..a.clone()
    };
    assert!(ssim(&a, &inv).unwrap() < 0.0);
}

/// Direct per-window SSIM with a 2-D Gaussian built from scratch.
fn ssim_brute(a: &RgbImage, b: &RgbImage) -> f64 {
    let (w, h) = (a.width, a.height);
    let y = |img: &RgbImage, x: usize, yy: usize| {
        let p = img.pixel(x, yy);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut kernel = [[0.0; 11]; 11];
    let mut sum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            sum += *k;
        }
    }
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / sum;
                    ma += k * y(a, x0 + j, y0 + i);
                    mb += k * y(b, x0 + j, y0 + i);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / sum;
                    let (p, q) = (y(a, x0 + j, y0 + i) - ma, y(b, x0 + j, y0 + i) - mb);
                    va += k * p * p;
                    vb += k * q * q;
                    cov += k * p * q;
                }
            }
            let (c1, c2) = (1e-4, 9e-4);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_brute_force() {
    for seed in 0..5 {
        let a = random_image(19, 14, seed);
        let mut b = a.clone();
        let noise = random_image(19, 14, seed + 50);
        for (v, e) in b.data.iter_mut().zip(&noise.data) {
            *v = (*v * 0.7 + 0.3 * e).min(1.0);
        }
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_brute(&a, &b);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }
}

fn det(sample: &str, category: Category, x: f64, y: f64, score: f64) -> Detection {
    Detection {
        sample_token: sample.into(),
        category,
        translation: [x, y, 0.8],
        size: [1.9, 4.5, 1.6],
        yaw: 0.0,
        score,
    }
}

fn gt(sample: &str, category: Category, x: f64, y: f64) -> GtBox {
    GtBox {
        sample_token: sample.into(),
        category,
        translation: [x, y, 0.8],
    }
}

#[test]
fn matching_basics() {
    let gts = vec![gt("s", Category::Car, 1.0, 2.0)];
    let m = match_detections(&[det("s", Category::Car, 1.0, 2.0, 0.9)], &gts, Category::Car, 2.0);
    assert_eq!(m.matches, vec![(0, 0, 0.0)]);

    let m = match_detections(&[det("s", Category::Car, 4.0, 2.0, 0.9)], &gts, Category::Car, 2.0);
    assert!(m.matches.is_empty());
    assert_eq!((m.unmatched_preds.clone(), m.unmatched_gts.clone()), (vec![0], vec![0]));

    // other sample or other class never matches
    let m = match_detections(&[det("t", Category::Car, 1.0, 2.0, 0.9)], &gts, Category::Car, 2.0);
    assert!(m.matches.is_empty());
    let m = match_detections(&[det("s", Category::Bus, 1.0, 2.0, 0.9)], &gts, Category::Car, 2.0);
    assert!(m.ranked.is_empty() && m.unmatched_gts == vec![0]);
}

#[test]
fn matching_ties_and_greed() {
    // equidistant ground truths: the lower index wins
    let gts = vec![gt("s", Category::Car, -1.0, 0.0), gt("s", Category::Car, 1.0, 0.0)];
    let m = match_detections(&[det("s", Category::Car, 0.0, 0.0, 0.5)], &gts, Category::Car, 2.0);
    assert_eq!(m.matches[0].1, 0);
    // the higher score claims the shared nearest ground truth first
    let preds = vec![det("s", Category::Car, -0.9, 0.0, 0.2), det("s", Category::Car, -0.5, 0.0, 0.9)];
    let m = match_detections(&preds, &gts, Category::Car, 2.0);
    assert_eq!(m.ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 0]);
    assert_eq!(m.matches, vec![(1, 0, 0.5), (0, 1, 1.9)]);
}

#[test]
fn ap_closed_forms() {
    assert_eq!(average_precision(&[true], 1, 0.1, 0.1), Some(1.0));
    assert_eq!(average_precision(&[], 3, 0.1, 0.1), Some(0.0));
    assert_eq!(average_precision(&[], 0, 0.1, 0.1), None);
    assert_eq!(average_precision(&[false], 0, 0.1, 0.1), Some(0.0));
    // TP, FP, TP with 2 GT: envelope 1 up to recall 0.5, then 2/3
    let ap = average_precision(&[true, false, true], 2, 0.1, 0.1).unwrap();
    assert!((ap - (0.4 * 1.0 + 0.5 * 2.0 / 3.0) / 0.9).abs() < 1e-15);
}

/// Envelope sampled at `n` recall points by scanning every operating point.
fn ap_numeric(flags: &[bool], n_gt: usize, n: usize) -> f64 {
    let mut pts = Vec::new();
    let mut tp = 0;
    for (k, f) in flags.iter().enumerate() {
        tp += *f as usize;
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for i in 0..n {
        let r = 0.1 + 0.9 * (i as f64 + 0.5) / n as f64;
        let p = pts.iter().filter(|(pr, _)| *pr >= r).map(|(_, pp)| *pp).fold(0.0, f64::max);
        sum += if p >= 0.1 { p } else { 0.0 };
    }
    sum / n as f64
}

#[test]
fn ap_matches_numeric_integration() {
    let flags = [true, false, true, true, false, false, true, false];
    let exact = average_precision(&flags, 5, 0.1, 0.1).unwrap();
    let numeric = ap_numeric(&flags, 5, 100_000);
    assert!((exact - numeric).abs() < 1e-4, "{exact} vs {numeric}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn ap_monotonicity(flags in prop::collection::vec(prop::bool::ANY, 0..15), extra_gt in 0usize..4) {
        let n_gt = flags.iter().filter(|f| **f).count() + extra_gt;
        prop_assert!(n_gt > 0 || flags.iter().all(|f| !f));
        let base = average_precision(&flags, n_gt, 0.1, 0.1);
        if let Some(b) = base {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
        // a lowest-score false positive never raises AP
        let mut with_fp = flags.clone();
        with_fp.push(false);
        let fp = average_precision(&with_fp, n_gt, 0.1, 0.1).unwrap();
        prop_assert!(fp <= base.unwrap_or(0.0) + 1e-12);
        // a new top-ranked true positive for a previously unmatched GT never lowers AP
        if extra_gt > 0 {
            let mut with_tp = vec![true];
            with_tp.extend(&flags);
            let tp = average_precision(&with_tp, n_gt, 0.1, 0.1).unwrap();
            prop_assert!(tp + 1e-12 >= base.unwrap());
        }
    }
}

#[test]
fn perfect_and_offset_predictions() {
    let t = tiny_tables();
    let perfect = detections_from_annotations(&t, 0.0);
    let s = evaluate(&perfect, &t, &Category::ALL, &DISTANCE_THRESHOLDS).unwrap();
    assert_eq!((s.map, s.mate), (1.0, 0.0));
    assert_eq!(s.per_class[&Category::Car].tp, 3);

    let shifted = detections_from_annotations(&t, 0.3);
    let s = evaluate(&shifted, &t, &Category::ALL, &DISTANCE_THRESHOLDS).unwrap();
    assert!((s.mate - 0.3).abs() < 1e-12);
    assert_eq!(s.map, 1.0);
}

#[test]
fn unknown_sample_is_rejected() {
    let t = tiny_tables();
    let preds = vec![det("nope", Category::Car, 0.0, 0.0, 0.5)];
    assert!(matches!(
        evaluate(&preds, &t, &Category::ALL, &DISTANCE_THRESHOLDS),
        Err(MetricsError::UnknownSample { index: 0, .. })
    ));
    let mut bad = detections_from_annotations(&t, 0.0);
    bad[1].score = 1.5;
    assert!(matches!(
        evaluate(&bad, &t, &Category::ALL, &DISTANCE_THRESHOLDS),
        Err(MetricsError::InvalidDetection { index: 1, .. })
    ));
}

#[test]
fn class_without_tp_counts_as_unit_error() {
    let t = tiny_tables();
    let s = evaluate(&[], &t, &Category::ALL, &DISTANCE_THRESHOLDS).unwrap();
    assert_eq!(s.mate, 1.0);
    assert_eq!(s.map, 0.0);
    assert_eq!(s.per_class[&Category::Bus].ate, None);
    assert!(s.per_class[&Category::Bus].ap.iter().all(|a| a.1.is_none()));
}

#[test]
fn evaluation_ignores_input_order() {
    let t = tiny_tables();
    let mut preds = detections_from_annotations(&t, 0.4);
    for (i, p) in preds.iter_mut().enumerate() {
        p.score = 0.3 + 0.2 * i as f64;
        p.translation[1] += 0.1 * i as f64;
    }
    preds.push(det(&t.sample[0].token, Category::Car, 30.0, 0.0, 0.55));
    let a = evaluate(&preds, &t, &Category::ALL, &DISTANCE_THRESHOLDS).unwrap();
    preds.reverse();
    let b = evaluate(&preds, &t, &Category::ALL, &DISTANCE_THRESHOLDS).unwrap();
    assert_eq!(a, b);
}

#[test]
fn manifest_cells_follow_the_mask() {
    let empty = MatrixManifest {
        val_roots: BTreeMap::new(),
        cells: BTreeMap::new(),
    };
    match check_cells(&empty) {
        Err(MetricsError::MissingCells(c)) => assert_eq!(c, EVALUATED_CELLS.map(String::from).to_vec()),
        other => panic!("{other:?}"),
    }
    let mut extra = empty.clone();
    for c in EVALUATED_CELLS {
        extra.cells.insert(c.into(), PathBuf::from("p.json"));
    }
    assert!(check_cells(&extra).is_ok());
    extra.cells.insert("Ac".into(), PathBuf::from("p.json"));
    assert!(matches!(check_cells(&extra), Err(MetricsError::NotEvaluated(c)) if c == vec!["Ac".to_string()]));
}

#[test]
fn matrix_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let t = tiny_tables();
    crate::dataset::write_tables(&t, &dir.path().join("val")).unwrap();
    let perfect = detections_from_annotations(&t, 0.0);
    std::fs::write(dir.path().join("perfect.json"), serde_json::to_string(&perfect).unwrap()).unwrap();
    std::fs::write(dir.path().join("shifted.json"), serde_json::to_string(&detections_from_annotations(&t, 0.3)).unwrap()).unwrap();
    let mut m = MatrixManifest {
        val_roots: COLS.iter().map(|c| (c.to_string(), PathBuf::from("val"))).collect(),
        cells: BTreeMap::new(),
    };
    for c in EVALUATED_CELLS {
        let f = if c == "Db" { "shifted.json" } else { "perfect.json" };
        m.cells.insert(c.into(), PathBuf::from(f));
    }
    let mx = experiment_matrix(&m, dir.path()).unwrap();
    assert_eq!(mx.cells.len(), 8);
    assert_eq!(mx.cell('A', 'a').unwrap().map, 1.0);
    assert_eq!(mx.cell('A', 'a'), mx.cell('B', 'a'));
    assert!((mx.cell('D', 'b').unwrap().mate - 0.3).abs() < 1e-12);
    assert_eq!(
        mx.to_csv(),
        "split,a,b,c,d\nA,1.0000,1.0000,n/a,n/a\nB,1.0000,1.0000,n/a,n/a\nC,1.0000,n/a,1.0000,n/a\nD,n/a,1.0000,n/a,1.0000\n"
    );
    assert!(mx.to_csv_mate().contains("D,n/a,0.3000,n/a,0.0000"));
    let svg = mx.to_svg();
    assert!(svg.starts_with("<svg") && svg.contains(">Db</text>"));
    // summaries serialize
    serde_json::to_string(&mx).unwrap();
}
