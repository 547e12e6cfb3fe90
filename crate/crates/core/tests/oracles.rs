//! Library results checked against the independent implementations in
//! `common`.

mod common;

use common::{poisson_dense_oracle, psnr_oracle, ssim_oracle, visibility_oracle};
use proptest::prelude::*;
use uvforge_core::image::Image;
use uvforge_core::metrics::{psnr, psnr_masked, ssim};
use uvforge_core::model::{
    bake_texture, instantiate_shape, instantiate_texture, make_synthetic_model, make_synthetic_model_with_layout,
    sample_identity, Camera, FitParams, GridLayout,
};
use uvforge_core::raster::{default_eps, rasterize_depth, render, visible_vertices};
use uvforge_core::rng;
use uvforge_core::uv::{extract_uv, mask_fraction, poisson_blend, poisson_residual, VisibilityMask};

fn random_image(seed: u64, w: usize, h: usize) -> Image {
    let mut r = rng::seeded(seed);
    Image::from_fn(w, h, |_, _| [rng::unit(&mut r), rng::unit(&mut r), rng::unit(&mut r)])
}

fn correlated_pair(seed: u64) -> (Image, Image) {
    let a = random_image(seed, 24, 20);
    let mut r = rng::seeded(seed ^ 0xabc);
    let b = Image::from_fn(24, 20, |x, y| a.get(x, y).map(|v| (0.7 * v + 0.3 * rng::unit(&mut r)).clamp(0.0, 1.0)));
    (a, b)
}

#[test]
fn psnr_and_ssim_match_direct_formulas() {
    for seed in 0..100 {
        let (a, b) = correlated_pair(seed);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - psnr_oracle(&a, &b)).abs() < 1e-9, "psnr seed {seed}");
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-6, "ssim seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>()) {
        let (a, b) = correlated_pair(seed);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0);
    }

    #[test]
    fn masked_psnr_with_full_mask_equals_psnr(seed in any::<u64>()) {
        let (a, b) = correlated_pair(seed);
        let full = vec![true; 24 * 20];
        prop_assert!((psnr_masked(&a, &b, &full, 1.0).unwrap() - psnr(&a, &b, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn poisson_output_satisfies_the_equation(seed in any::<u64>()) {
        let source = random_image(seed, 20, 20);
        let target = random_image(seed.wrapping_add(1), 20, 20);
        let mut r = rng::seeded(seed);
        let (x0, y0) = (1 + (rng::unit(&mut r) * 6.0) as usize, 1 + (rng::unit(&mut r) * 6.0) as usize);
        let region = VisibilityMask::from_fn(20, 20, |x, y| (x0..x0 + 12).contains(&x) && (y0..y0 + 12).contains(&y));
        let out = poisson_blend(&source, &target, &region).unwrap();
        prop_assert!(poisson_residual(&out, &source, &region) < 1e-6);
        for y in 0..20 {
            for x in 0..20 {
                if !region.get(x, y) {
                    prop_assert_eq!(out.get(x, y), target.get(x, y));
                }
            }
        }
    }
}

#[test]
fn poisson_matches_dense_solve_on_16x16_regions() {
    for seed in 0..5 {
        let source = random_image(10 + seed, 20, 20);
        let target = random_image(20 + seed, 20, 20);
        let region = VisibilityMask::from_fn(20, 20, |x, y| (2..18).contains(&x) && (2..18).contains(&y));
        let out = poisson_blend(&source, &target, &region).unwrap();
        let oracle = poisson_dense_oracle(&source, &target, region.as_slice());
        let worst = out.data().iter().zip(oracle.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst < 1e-6, "seed {seed}: {worst}");
    }
}

#[test]
fn visibility_agrees_with_ray_casting() {
    let yaws = [-80.0f64, -35.0, 0.0, 40.0, 90.0];
    for mesh in 0..10u64 {
        let layout = GridLayout { rows: 13, cols: 21 };
        let model = make_synthetic_model_with_layout(mesh, layout, 6, 4).unwrap();
        assert!(model.triangles().len() <= 500);
        let params = sample_identity(&model, 1000 + mesh);
        let mut vertices = instantiate_shape(&model, &params.p).unwrap();
        let mut r = rng::seeded(mesh);
        for v in &mut vertices {
            for c in v.iter_mut() {
                *c += 0.03 * rng::standard_normal(&mut r);
            }
        }
        for &yaw in &yaws {
            let camera = Camera::frontal(64, 64).with_yaw(yaw.to_radians());
            let depth = rasterize_depth(&vertices, model.triangles(), &camera, 64, 64);
            let eps = default_eps(&vertices);
            let got = visible_vertices(&vertices, model.triangles(), &camera, &depth, eps);
            let want = visibility_oracle(&vertices, model.triangles(), &camera, 64, 64, eps);
            let diff: Vec<usize> = (0..got.len()).filter(|&i| got[i] != want[i]).collect();
            assert!(diff.is_empty(), "mesh {mesh} yaw {yaw}: disagree at {diff:?}");
        }
    }
}

#[test]
fn profile_hides_the_far_cheek() {
    let model = make_synthetic_model(3, 2000, 10, 10).unwrap();
    let params = FitParams::mean(&model, Camera::default().with_yaw(90f64.to_radians()));
    let vertices = instantiate_shape(&model, &params.p).unwrap();
    let depth = rasterize_depth(&vertices, model.triangles(), &params.camera, 128, 128);
    let vis = visible_vertices(&vertices, model.triangles(), &params.camera, &depth, default_eps(&vertices));
    let left_cheek: Vec<usize> = (0..vertices.len()).filter(|&i| vertices[i][0] < -0.5).collect();
    assert!(!left_cheek.is_empty());
    assert!(left_cheek.iter().all(|&i| !vis[i]));
}

fn textured(model: &uvforge_core::model::MorphableModel, seed: u64) -> (FitParams, Image) {
    let params = sample_identity(model, seed);
    let colors = instantiate_texture(model, &params.lambda).unwrap();
    (params, bake_texture(model, &colors, 64, 64))
}

#[test]
fn render_extract_round_trip() {
    let model = make_synthetic_model(11, 2000, 20, 20).unwrap();
    let (params, uv) = textured(&model, 5);
    let image = render(&model, &params, &uv, 128, 128).unwrap().image;
    let (extracted, mask) = extract_uv(&image, &model, &params, 64, 64).unwrap();
    let p = psnr_masked(&extracted, &uv, mask.as_slice(), 1.0).unwrap();
    assert!(p >= 30.0, "round trip psnr {p}");

    let black = Image::new(128, 128);
    let (zeros, _) = extract_uv(&black, &model, &params, 64, 64).unwrap();
    assert!(zeros.data().iter().all(|&v| v == 0.0));
}

#[test]
fn missing_fraction_grows_with_yaw() {
    let model = make_synthetic_model(11, 2000, 20, 20).unwrap();
    let (params, uv) = textured(&model, 6);
    let mut last = -1.0;
    for yaw in [0.0f64, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0] {
        let p = FitParams { camera: params.camera.with_yaw(yaw.to_radians()), ..params.clone() };
        let image = render(&model, &p, &uv, 128, 128).unwrap().image;
        let (_, mask) = extract_uv(&image, &model, &p, 64, 64).unwrap();
        let f = mask_fraction(&mask);
        assert!(f > last, "yaw {yaw}: {f} after {last}");
        last = f;
    }
    assert!(last >= 0.40, "profile missing fraction {last}");
}

#[test]
fn white_texture_renders_white_face() {
    let model = make_synthetic_model(11, 800, 4, 4).unwrap();
    let params = sample_identity(&model, 2);
    let uv = Image::filled(64, 64, [1.0; 3]);
    let out = render(&model, &params, &uv, 64, 64).unwrap();
    assert!(out.covered_pixels > 0);
    let white = out.image.data().chunks(3).filter(|p| p.iter().all(|&v| v == 1.0)).count();
    assert_eq!(white, out.covered_pixels);
}

#[test]
fn symmetric_face_renders_mirror_equal() {
    let model = make_synthetic_model(11, 2000, 4, 4).unwrap();
    let params = FitParams::mean(&model, Camera::default());
    let colors = instantiate_texture(&model, &params.lambda).unwrap();
    let uv = bake_texture(&model, &colors, 64, 64);
    let img = render(&model, &params, &uv, 127, 127).unwrap().image;
    let mirrored = img.mirrored_horizontal();
    // Within one pixel: compare each pixel with the best of its row neighbours.
    let mut worst = 0.0f64;
    for y in 0..127 {
        for x in 1..126 {
            let a = img.get(x, y);
            let best = (x - 1..=x + 1)
                .map(|xx| (0..3).map(|c| (a[c] - mirrored.get(xx, y)[c]).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
    }
    assert!(worst < 0.05, "mirror mismatch {worst}");
}
