//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::time::{Duration, Instant};

use common::gradcheck::{max_relative_error, op_cases};
use common::{poisson_dense_oracle, psnr_oracle, ssim_oracle, visibility_oracle};
use uvforge::config::PipelineConfig;
use uvforge::formats::Report;
use uvforge::pipeline::run_pipeline;
use uvforge_core::fit::{gauss_newton_fit, landmark_rmse, FitWeights, Landmarks};
use uvforge_core::image::Image;
use uvforge_core::metrics::{psnr, psnr_masked, ssim};
use uvforge_core::model::{
    bake_texture, instantiate_shape, instantiate_texture, make_synthetic_model, make_synthetic_model_with_layout, sample_identity, Camera,
    FitParams, GridLayout,
};
use uvforge_core::nn::{train, TrainConfig, TrainSample, UvGan};
use uvforge_core::raster::{default_eps, rasterize_depth, render, visible_vertices};
use uvforge_core::rng;
use uvforge_core::uv::{extract_uv, mask_fraction, poisson_blend, poisson_residual, VisibilityMask};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn timed(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let v = f();
    let elapsed = t.elapsed();
    let in_time = elapsed <= limit;
    let pass = v.pass && in_time;
    let budget = if in_time { String::new() } else { format!(" (over the {}s budget)", limit.as_secs()) };
    println!(
        "[{}] {id}. {name}: {}; {:.1}s{budget}",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn random_image(seed: u64, w: usize, h: usize) -> Image {
    let mut r = rng::seeded(seed);
    Image::from_fn(w, h, |_, _| [rng::unit(&mut r), rng::unit(&mut r), rng::unit(&mut r)])
}

fn autodiff() -> Verdict {
    let cases = op_cases();
    let mut worst = (0.0f64, "");
    for case in &cases {
        for seed in 0..20 {
            let e = max_relative_error(case, 1000 + seed);
            if !(e <= worst.0) {
                worst = (e, case.name);
            }
        }
    }
    verdict(worst.0 < 1e-4, format!("{} ops x 20 seeds, worst relative error {:.2e} ({}) < 1e-4", cases.len(), worst.0, worst.1))
}

fn fitting() -> Verdict {
    let model = make_synthetic_model(2024, 2000, 20, 20).unwrap();
    let mut recovered = 0;
    let mut monotone = true;
    for case in 0..20u64 {
        let mut gt = sample_identity(&model, 100 + case);
        gt.camera = gt.camera.with_yaw((-60.0 + 120.0 * case as f64 / 19.0).to_radians());
        let colors = instantiate_texture(&model, &gt.lambda).unwrap();
        let uv = bake_texture(&model, &colors, 64, 64);
        let image = render(&model, &gt, &uv, 128, 128).unwrap().image;
        let lm = Landmarks::project(&model, &gt).unwrap();
        let mut r = rng::seeded(case);
        let mut init = gt.clone();
        init.camera.yaw += 5f64.to_radians();
        for (k, p) in init.p.iter_mut().enumerate() {
            *p += model.shape_eigenvalues()[k].sqrt() / 10.0 * rng::standard_normal(&mut r);
        }
        for (k, p) in init.lambda.iter_mut().enumerate() {
            *p += model.texture_eigenvalues()[k].sqrt() / 10.0 * rng::standard_normal(&mut r);
        }
        let rep = gauss_newton_fit(&image, &lm, &model, &init, &FitWeights::default(), 50, 1e-9).unwrap();
        monotone &= rep.cost_history.windows(2).all(|w| w[1] <= w[0]);
        let dyaw = (rep.params.camera.yaw - gt.camera.yaw).to_degrees().abs();
        let rmse = landmark_rmse(&model, &rep.params, &lm).unwrap();
        if dyaw < 0.5 && rmse < 0.5 {
            recovered += 1;
        }
    }
    verdict(recovered >= 18 && monotone, format!("{recovered}/20 within 0.5 deg yaw and 0.5 px RMSE (need 18), cost histories monotone: {monotone}"))
}

fn visibility() -> Verdict {
    let yaws = [-80.0f64, -35.0, 0.0, 40.0, 90.0];
    let mut checks = 0;
    let mut mismatches = 0;
    let mut max_triangles = 0;
    for mesh in 0..50u64 {
        let model = make_synthetic_model_with_layout(mesh, GridLayout { rows: 13, cols: 21 }, 6, 4).unwrap();
        max_triangles = max_triangles.max(model.triangles().len());
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
            mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
            checks += 1;
        }
    }
    verdict(
        mismatches == 0 && max_triangles <= 500,
        format!("50 meshes (<= {max_triangles} triangles) x 5 yaws = {checks} views, {mismatches} vertex disagreements with ray casting"),
    )
}

fn uv_round_trip() -> Verdict {
    let model = make_synthetic_model(11, 2000, 20, 20).unwrap();
    let params = sample_identity(&model, 5);
    let colors = instantiate_texture(&model, &params.lambda).unwrap();
    let uv = bake_texture(&model, &colors, 64, 64);
    let image = render(&model, &params, &uv, 128, 128).unwrap().image;
    let (extracted, mask) = extract_uv(&image, &model, &params, 64, 64).unwrap();
    let p = psnr_masked(&extracted, &uv, mask.as_slice(), 1.0).unwrap();
    let fractions: Vec<f64> = [0.0f64, 45.0, 90.0]
        .iter()
        .map(|yaw| {
            let q = FitParams { camera: params.camera.with_yaw(yaw.to_radians()), ..params.clone() };
            let img = render(&model, &q, &uv, 128, 128).unwrap().image;
            mask_fraction(&extract_uv(&img, &model, &q, 64, 64).unwrap().1)
        })
        .collect();
    let increasing = fractions[0] < fractions[1] && fractions[1] < fractions[2];
    verdict(
        p >= 30.0 && increasing && fractions[2] >= 0.40,
        format!(
            "frontal PSNR {p:.2} dB >= 30 on visible texels; missing fraction 0/45/90 deg = {:.3}/{:.3}/{:.3} (increasing, >= 0.40 at 90)",
            fractions[0], fractions[1], fractions[2]
        ),
    )
}

fn metric_oracles() -> Verdict {
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let a = random_image(seed, 24, 20);
        let mut r = rng::seeded(seed ^ 0xabc);
        let b = Image::from_fn(24, 20, |x, y| a.get(x, y).map(|v| (0.7 * v + 0.3 * rng::unit(&mut r)).clamp(0.0, 1.0)));
        dp = dp.max((psnr(&a, &b, 1.0).unwrap() - psnr_oracle(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    let x = random_image(7, 32, 32);
    let self_ssim = ssim(&x, &x).unwrap();
    let c1 = 1e-4;
    let constant = ssim(&Image::filled(32, 32, [0.0; 3]), &Image::filled(32, 32, [1.0; 3])).unwrap();
    let dc = (constant - c1 / (1.0 + c1)).abs();
    verdict(
        dp < 1e-9 && ds < 1e-6 && self_ssim == 1.0 && dc < 1e-8,
        format!("100 pairs: |dPSNR| {dp:.1e} < 1e-9, |dSSIM| {ds:.1e} < 1e-6; SSIM(x,x) = {self_ssim}; SSIM(0,1) = {constant:.6e} (off by {dc:.1e} < 1e-8)"),
    )
}

fn poisson() -> Verdict {
    let mut residual = 0.0f64;
    for seed in 0..10 {
        let source = random_image(seed, 20, 20);
        let target = random_image(seed + 100, 20, 20);
        let region = VisibilityMask::from_fn(20, 20, |x, y| (3..17).contains(&x) && (2..15).contains(&y));
        let out = poisson_blend(&source, &target, &region).unwrap();
        residual = residual.max(poisson_residual(&out, &source, &region));
    }
    let k = 0.37;
    let flat = Image::filled(20, 20, [0.8, 0.1, 0.5]);
    let boundary = Image::filled(20, 20, [k; 3]);
    let region = VisibilityMask::from_fn(20, 20, |x, y| (2..18).contains(&x) && (2..18).contains(&y));
    let out = poisson_blend(&flat, &boundary, &region).unwrap();
    let constant_err = out.data().iter().fold(0.0f64, |m, v| m.max((v - k).abs()));
    let mut oracle_err = 0.0f64;
    for seed in 0..5 {
        let source = random_image(10 + seed, 20, 20);
        let target = random_image(20 + seed, 20, 20);
        let out = poisson_blend(&source, &target, &region).unwrap();
        let dense = poisson_dense_oracle(&source, &target, region.as_slice());
        oracle_err = oracle_err.max(out.data().iter().zip(dense.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
    }
    verdict(
        residual < 1e-6 && constant_err < 1e-6 && oracle_err < 1e-6,
        format!("Laplacian residual {residual:.1e}, constant-boundary error {constant_err:.1e}, 16x16 dense-solve error {oracle_err:.1e} (all < 1e-6)"),
    )
}

/// Eight fixed samples at assorted yaws, ground-truth geometry.
fn overfit_samples() -> Vec<TrainSample> {
    let model = make_synthetic_model(11, 2000, 20, 20).unwrap();
    (0..8u64)
        .map(|i| {
            let p = sample_identity(&model, 300 + i);
            let colors = instantiate_texture(&model, &p.lambda).unwrap();
            let target = bake_texture(&model, &colors, 64, 64);
            let q = FitParams { camera: p.camera.with_yaw((-70.0 + 20.0 * i as f64).to_radians()), ..p.clone() };
            let img = render(&model, &q, &target, 128, 128).unwrap().image;
            let (observed, mask) = extract_uv(&img, &model, &q, 64, 64).unwrap();
            TrainSample { observed, mask, target, label: i as usize, identity_view: None }
        })
        .collect()
}

fn toy_training(smoke: &Report) -> Verdict {
    let data = overfit_samples();
    let mut gan = UvGan::new(64, 0.5, 21).unwrap();
    let cfg = TrainConfig { epochs: 2000, batch_size: 8, seed: 4, ..TrainConfig::default() };
    let out = train(&mut gan, None, &data, &cfg);
    let (steps, gen) = match &out {
        Ok(o) => (o.steps, o.last.gen),
        Err(e) => {
            return verdict(false, format!("overfit run failed: {e}"));
        }
    };
    let finite = smoke.get("train.finite") == Some("true");
    let get = |k: &str| smoke.get_f64(k).unwrap_or(f64::NAN);
    let (completed, noisy) = (get("complete.psnr_completed"), get("complete.psnr_noise_filled"));
    verdict(
        steps == 2000 && gen < 0.02 && finite && completed > noisy,
        format!(
            "overfit L_gen {gen:.4} < 0.02 after {steps} steps; smoke run ({} steps, lambda 1e-2/4e-2/1e-3) finite: {finite}; held-out PSNR completed {completed:.2} dB > noise-filled {noisy:.2} dB",
            smoke.get("train.steps").unwrap_or("?")
        ),
    )
}

fn recognition(smoke: &Report) -> Verdict {
    let get = |k: &str| smoke.get_f64(k).unwrap_or(f64::NAN);
    let (same, cross) = (get("eval.same_identity_similarity"), get("eval.cross_identity_similarity"));
    let (diag, off) = (get("eval.pose_matrix_diagonal_mean"), get("eval.pose_matrix_off_diagonal_mean"));
    let (t2t, plain) = (get("eval.template2template_accuracy"), get("eval.plain_accuracy"));
    verdict(
        same > cross && diag >= off && t2t >= plain,
        format!(
            "{} identities: same {same:.3} > cross {cross:.3}; pose diagonal {diag:.3} >= off-diagonal {off:.3}; Template2Template {t2t:.3} >= plain {plain:.3}",
            smoke.get("eval.identities").unwrap_or("?")
        ),
    )
}

fn main() {
    let minute = Duration::from_secs(60);
    let mut ok = true;
    ok &= timed(1, "autodiff gradient checks", minute, autodiff);
    ok &= timed(2, "fitting recovery", 5 * minute, fitting);
    ok &= timed(3, "visibility oracle equivalence", 2 * minute, visibility);
    ok &= timed(4, "UV round trip and missing fraction", minute, uv_round_trip);
    ok &= timed(5, "metric oracles", minute, metric_oracles);
    ok &= timed(6, "Poisson blend", minute, poisson);

    let cfg = PipelineConfig::smoke();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let t = Instant::now();
    let first = run_pipeline(&cfg, dirs[0].path());
    let smoke_time = t.elapsed();
    let smoke = match &first {
        Ok(run) => run.report.clone(),
        Err(e) => {
            println!("smoke pipeline failed: {e}");
            Report::new()
        }
    };
    println!("smoke pipeline: {:.1}s", smoke_time.as_secs_f64());
    ok &= timed(7, "toy training sanity", 15 * minute - smoke_time, || toy_training(&smoke));
    ok &= timed(8, "recognition protocol properties", minute, || recognition(&smoke));
    ok &= timed(9, "pipeline determinism", 10 * minute, || {
        let second = run_pipeline(&cfg, dirs[1].path());
        match (&first, &second) {
            (Ok(a), Ok(b)) => {
                let (ra, rb) = (std::fs::read(&a.report_path).unwrap(), std::fs::read(&b.report_path).unwrap());
                verdict(ra == rb, format!("two smoke runs, reports {} ({} bytes)", if ra == rb { "byte-identical" } else { "differ" }, ra.len()))
            }
            (Err(e), _) | (_, Err(e)) => verdict(false, format!("pipeline failed: {e}")),
        }
    });
    if !ok {
        std::process::exit(1);
    }
}
