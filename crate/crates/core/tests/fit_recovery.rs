//! Generate-then-fit: images rendered from known parameters are fitted from
//! a perturbed start and the recovered pose is compared with the truth.

use uvforge_core::fit::{gauss_newton_fit, landmark_rmse, FitWeights, Landmarks};
use uvforge_core::model::{bake_texture, instantiate_texture, make_synthetic_model, sample_identity};
use uvforge_core::raster::render;
use uvforge_core::rng;

#[test]
fn perturbed_fits_recover_yaw_and_landmarks() {
    let model = make_synthetic_model(2024, 2000, 20, 20).unwrap();
    let mut recovered = 0;
    for case in 0..20u64 {
        let mut gt = sample_identity(&model, 100 + case);
        let yaw = -60.0 + 120.0 * case as f64 / 19.0;
        gt.camera = gt.camera.with_yaw(f64::to_radians(yaw));
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
        assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]), "case {case}: history not monotone");
        let dyaw = (rep.params.camera.yaw - gt.camera.yaw).to_degrees().abs();
        let rmse = landmark_rmse(&model, &rep.params, &lm).unwrap();
        if dyaw < 0.5 && rmse < 0.5 {
            recovered += 1;
        }
    }
    assert!(recovered >= 18, "only {recovered}/20 fits recovered");
}
