use super::*;
use crate::gradcheck::{test_model, tiny_view, BatchObjective, PatchObjective, GRADIENT_GROUPS};
use crate::optimizer::grad_check;
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
    Ray::new(Vector3::from(o), Vector3::from(d), 0.2, 40.0)
}

#[test]
fn single_bin_sample_lies_in_range() {
    let r = ray([0.0; 3], [1.0, 0.0, 0.0]);
    for seed in 0..50 {
        let t = sample_ray(&r, 1, seed, 3);
        assert!(t[0] >= r.near && t[0] < r.far);
    }
}

#[test]
fn samples_sorted_and_inside_their_bins() {
    let r = ray([0.0; 3], [0.0, 1.0, 0.0]);
    let n = 32;
    let bin = (r.far - r.near) / n as f64;
    for idx in 0..20 {
        let t = sample_ray(&r, n, 7, idx);
        for (i, v) in t.iter().enumerate() {
            assert!(*v >= r.near + i as f64 * bin - 1e-12 && *v < r.near + (i + 1) as f64 * bin + 1e-12);
        }
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(t, sample_ray(&r, n, 7, idx));
    }
    assert_ne!(sample_ray(&r, n, 7, 0), sample_ray(&r, n, 7, 1));
}

#[test]
fn sample_mean_matches_interval_midpoint() {
    let r = ray([0.0; 3], [0.0, 0.0, 1.0]);
    let n = 8;
    let mut total = 0.0;
    let seeds = 100_000;
    for seed in 0..seeds {
        total += sample_ray(&r, n, seed, 0).iter().sum::<f64>() / n as f64;
    }
    let mean = total / seeds as f64;
    let mid = 0.5 * (r.near + r.far);
    assert!((mean - mid).abs() < 0.01 * mid, "{mean} vs {mid}");
}

#[test]
fn alpha_closed_forms() {
    assert!(geometry_to_alpha(-800.0f64, 1.0) < 1e-300);
    let s = (std::f64::consts::E - 1.0).ln();
    let a = geometry_to_alpha(s, std::f64::consts::LN_2);
    assert!((a - 0.5).abs() < 1e-15);
    for s in [-5.0f64, -1.0, 0.0, 0.7, 1.5, 3.0] {
        let s: f64 = s;
        for d in [0.01f64, 0.3, 2.0] {
            let num = (geometry_to_alpha(s + 1e-6, d) - geometry_to_alpha(s - 1e-6, d)) / 2e-6;
            let ana = geometry_to_alpha_grad(s, d);
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-6, "s={s} d={d}: {num} vs {ana}");
        }
    }
}

#[test]
fn composite_closed_forms() {
    let sky = [0.3, 0.6];
    let c = composite(&[1.0], &[0.9, 0.1], &sky, &[2.0], 50.0);
    assert_eq!(c.weights, vec![1.0]);
    assert_eq!(c.t_res, 0.0);
    assert_eq!(c.feature, vec![0.9, 0.1]);

    let c = composite(&[0.5, 0.5], &[1.0, 0.0, 0.0, 1.0], &sky, &[1.0, 2.0], 50.0);
    assert_eq!(c.weights, vec![0.5, 0.25]);
    assert_eq!(c.t_res, 0.25);

    let c = composite(&[0.0; 4], &[7.0; 8], &sky, &[1.0, 2.0, 3.0, 4.0], 50.0);
    assert_eq!(c.feature, sky.to_vec());
    assert_eq!(c.depth, 50.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn composite_conserves_and_respects_occluders(
        alphas in prop::collection::vec(0.0f64..=1.0, 1..40),
        opaque in prop::option::of(0usize..40),
    ) {
        let mut alphas = alphas;
        if let Some(k) = opaque {
            if k < alphas.len() {
                alphas[k] = 1.0;
            }
        }
        let n = alphas.len();
        let ts: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let c = composite(&alphas, &vec![0.5; n], &[1.0], &ts, 100.0);
        let total: f64 = c.weights.iter().sum::<f64>() + c.t_res;
        prop_assert!((total - 1.0).abs() < 1e-6);
        let mut prefix = 1.0;
        for (w, a) in c.weights.iter().zip(&alphas) {
            prop_assert!(*w >= 0.0 && *w <= prefix);
            prefix *= 1.0 - a;
        }
        if let Some(k) = alphas.iter().position(|a| *a == 1.0) {
            prop_assert!(c.weights[k + 1..].iter().all(|w| *w == 0.0));
            prop_assert_eq!(c.t_res, 0.0);
        }
    }
}

/// Opacity of a constant-density slab [a, b] sampled with `n` bins over
/// [near, far], using the same alpha mapping as the renderer.
pub(crate) fn slab_opacity(sigma: f64, a: f64, b: f64, near: f64, far: f64, n: usize, seed: u64) -> f64 {
    let s = sigma.exp_m1().ln();
    let r = Ray::new(Vector3::zeros(), Vector3::x(), near, far);
    let ts = sample_ray(&r, n, seed, 0);
    let delta = (far - near) / n as f64;
    let alphas: Vec<f64> = ts
        .iter()
        .map(|t| if *t >= a && *t < b { geometry_to_alpha(s, delta) } else { 0.0 })
        .collect();
    composite(&alphas, &vec![0.0; n], &[0.0], &ts, far).opacity()
}

#[test]
fn slab_matches_beer_lambert() {
    for (sigma, len) in [(0.5, 2.0), (2.0, 0.75), (0.1, 8.0)] {
        // slab edges fall on bin boundaries of the 256-bin grid over [0, 4L]
        let o = slab_opacity(sigma, len, 2.0 * len, 0.0, 4.0 * len, 256, 1);
        let expect = 1.0 - (-sigma * len).exp();
        assert!((o - expect).abs() < 1e-3, "sigma={sigma} L={len}: {o} vs {expect}");
    }
}

fn empty_model() -> SceneModel<f64> {
    let mut m = test_model(2);
    let dec = m.layout.decoder.clone();
    let last = dec.layers() - 1;
    let w = dec.weight_offset(last);
    let n = dec.widths[last];
    m.params.values_mut()[w..w + n].iter_mut().for_each(|v| *v = 0.0);
    m.params.values_mut()[dec.bias_offset(last)] = -60.0;
    m
}

#[test]
fn empty_model_shows_sky() {
    let m = empty_model();
    let settings = RenderSettings {
        samples: 32,
        ..RenderSettings::default()
    };
    let r = ray([0.0, 0.0, 1.0], [1.0, 0.3, 0.1]);
    let out = render_ray(&m, &r, 1.0, &settings, 0);
    let sky = m.sky_eval([r.direction.x, r.direction.y, r.direction.z]).values;
    assert!(out.opacity < 1e-20);
    for (a, b) in out.feature.iter().zip(&sky) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((out.depth - r.far).abs() < 1e-9);
}

#[test]
fn render_ray_is_deterministic() {
    let m = test_model(3);
    let settings = RenderSettings {
        samples: 24,
        jitter: true,
        seed: 5,
        ..RenderSettings::default()
    };
    let r = ray([-5.0, 1.0, 1.0], [1.0, 0.0, -0.05]);
    let a = render_ray(&m, &r, 0.5, &settings, 9);
    let b = render_ray(&m, &r, 0.5, &settings, 9);
    assert_eq!(a, b);
    let c = render_ray(&m, &r, 0.5, &settings, 10);
    assert_ne!(a, c);
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let obj = BatchObjective::frozen();
    for group in GRADIENT_GROUPS {
        let r = grad_check(&obj, &obj.model.params, 1e-3, 64, 21, Some(group)).unwrap();
        assert!(r.checked > 0 && r.max_rel_error < 1e-4, "{group}: {r:?}");
    }
}

#[test]
fn upsample_patch_gradient_matches_finite_differences() {
    let obj = PatchObjective::frozen();
    for group in ["upsampler", "decoder_mlp", "env_grid", "sky_mlp"] {
        let r = grad_check(&obj, &obj.model.params, 1e-3, 64, 8, Some(group)).unwrap();
        assert!(r.checked > 0 && r.max_rel_error < 1e-4, "{group}: {r:?}");
    }
}

#[test]
fn upsample_factor_one_matches_direct_at_init() {
    let m = SceneModel::<f64>::new(
        crate::fields::tests::small_config(),
        vec![],
        test_model(0).scene_aabb,
        (0.0, 4.0),
        6,
    )
    .unwrap();
    let view = tiny_view();
    let direct = render_image(&m, &view.camera, &view.ego_pose, 0.5, &RenderSettings::default()).unwrap();
    let up = render_image(
        &m,
        &view.camera,
        &view.ego_pose,
        0.5,
        &RenderSettings {
            mode: RenderMode::Upsample { factor: 1 },
            ..RenderSettings::default()
        },
    )
    .unwrap();
    assert_eq!((direct.rgb.width, direct.rgb.height), (8, 8));
    assert_eq!((up.rgb.width, up.rgb.height), (8, 8));
    for (a, b) in direct.rgb.data.iter().zip(&up.rgb.data) {
        assert!((a - b).abs() < 1e-6);
    }
    let up2 = render_image(
        &m,
        &view.camera,
        &view.ego_pose,
        0.5,
        &RenderSettings {
            mode: RenderMode::Upsample { factor: 2 },
            ..RenderSettings::default()
        },
    )
    .unwrap();
    assert_eq!((up2.rgb.width, up2.rgb.height, up2.feature_width), (8, 8, 4));
    let bad = RenderSettings {
        mode: RenderMode::Upsample { factor: 3 },
        ..RenderSettings::default()
    };
    assert!(matches!(
        render_image(&m, &view.camera, &view.ego_pose, 0.5, &bad),
        Err(RenderError::Indivisible { .. })
    ));
}

fn output_from(rgb: RgbImage, opacity: Vec<f32>, depth: Vec<f32>) -> RenderOutput {
    RenderOutput {
        feature_width: rgb.width,
        feature_height: rgb.height,
        features: vec![],
        depth,
        opacity,
        rgb,
    }
}

#[test]
fn loss_closed_forms() {
    let w = LossWeights::default();
    let gt = RgbImage::filled(4, 3, [0.2, 0.4, 0.6]);
    let mut sky = Mask::new(4, 3);
    sky.set(0, 0, true);
    let mut opacity = vec![1.0; 12];
    opacity[0] = 0.0;
    let depth = vec![5.0; 12];
    let pred = output_from(gt.clone(), opacity, depth);
    let r = compute_loss(&pred, &gt, &[(3, 5.0), (7, 5.0)], &sky, &w).unwrap();
    assert_eq!((r.rgb_loss, r.depth_loss, r.sky_loss, r.total), (0.0, 0.0, 0.0, 0.0));

    let half = output_from(RgbImage::filled(4, 3, [0.5; 3]), vec![1.0; 12], vec![0.0; 12]);
    let zero = RgbImage::filled(4, 3, [0.0; 3]);
    let r = compute_loss(&half, &zero, &[], &Mask::new(4, 3), &w).unwrap();
    assert!((r.rgb_loss - 0.25).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn total_is_weighted_sum(
        rgb in prop::collection::vec(0.0f32..1.0, 36),
        gt in prop::collection::vec(0.0f32..1.0, 36),
        opacity in prop::collection::vec(0.0f32..1.0, 12),
        depth in prop::collection::vec(0.0f32..50.0, 12),
        mask in prop::collection::vec(0u8..2, 12),
        weights in prop::array::uniform3(0.0f64..2.0),
    ) {
        let w = LossWeights { rgb: weights[0], depth: weights[1], sky: weights[2] };
        let pred = output_from(RgbImage { width: 4, height: 3, data: rgb }, opacity, depth);
        let gt = RgbImage { width: 4, height: 3, data: gt };
        let m = Mask { width: 4, height: 3, data: mask };
        let r = compute_loss(&pred, &gt, &[(0, 3.0), (5, 10.0), (11, 1.0)], &m, &w).unwrap();
        let recomputed = w.rgb * r.rgb_loss + w.depth * r.depth_loss + w.sky * r.sky_loss;
        prop_assert!((r.total - recomputed).abs() < 1e-9);
    }
}
