//! Losses, network shapes, completion and training contracts.

use std::rc::Rc;

use proptest::prelude::*;
use uvforge_core::image::Image;
use uvforge_core::model::{bake_texture, instantiate_texture, make_synthetic_model, sample_identity, Camera, FitParams, MorphableModel};
use uvforge_core::nn::train::{compute_centers, fit_discriminator, discriminator_accuracy, identity_view};
use uvforge_core::nn::*;
use uvforge_core::raster::{render, RenderMap};
use uvforge_core::rng;
use uvforge_core::uv::{extract_uv, make_generator_input, VisibilityMask};

fn scalar_loss(f: impl Fn(&mut Tape) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t);
    t.scalar(v)
}

#[test]
fn reconstruction_loss_examples() {
    let a = vec![0.2, 0.4, 0.6, 0.8];
    assert_eq!(
        scalar_loss(|t| {
            let x = t.constant(a.clone(), &[1, 1, 2, 2]).unwrap();
            let y = t.constant(a.clone(), &[1, 1, 2, 2]).unwrap();
            loss_gen(t, x, y).unwrap()
        }),
        0.0
    );
    let l = scalar_loss(|t| {
        let x = t.constant(vec![1.0, 0.0, 1.0, 0.0], &[1, 1, 2, 2]).unwrap();
        let y = t.constant(vec![0.0; 4], &[1, 1, 2, 2]).unwrap();
        loss_gen(t, x, y).unwrap()
    });
    assert_eq!(l, 0.5);
    let full = scalar_loss(|t| {
        let x = t.constant(vec![0.9, 0.1, 0.5, 0.3, 0.2, 0.7], &[1, 3, 1, 2]).unwrap();
        let y = t.constant(vec![0.1, 0.4, 0.5, 0.9, 0.6, 0.2], &[1, 3, 1, 2]).unwrap();
        loss_gen(t, x, y).unwrap()
    });
    let half = scalar_loss(|t| {
        let x = t.constant(vec![0.45, 0.05, 0.25, 0.15, 0.1, 0.35], &[1, 3, 1, 2]).unwrap();
        let y = t.constant(vec![0.05, 0.2, 0.25, 0.45, 0.3, 0.1], &[1, 3, 1, 2]).unwrap();
        loss_gen(t, x, y).unwrap()
    });
    assert!((half - full / 2.0).abs() < 1e-15);
    let mut t = Tape::new();
    let x = t.constant(vec![0.0; 4], &[1, 1, 2, 2]).unwrap();
    let y = t.constant(vec![0.0; 3], &[1, 3, 1, 1]).unwrap();
    assert!(loss_gen(&mut t, x, y).is_err());
}

#[test]
fn adversarial_loss_examples() {
    let (obj, surrogate) = {
        let mut t = Tape::new();
        let r = t.constant(vec![0.5; 4], &[4, 1]).unwrap();
        let f = t.constant(vec![0.5; 4], &[4, 1]).unwrap();
        let (o, s) = loss_adv(&mut t, r, f).unwrap();
        (t.scalar(o), t.scalar(s))
    };
    assert!((obj - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    assert!((obj + 1.3863).abs() < 1e-4);
    assert!((surrogate - 2f64.ln()).abs() < 1e-15);

    let mut t = Tape::new();
    let r = t.constant(vec![1.0 - 1e-7], &[1, 1]).unwrap();
    let f = t.constant(vec![1e-7], &[1, 1]).unwrap();
    let o = discriminator_objective(&mut t, r, f).unwrap();
    assert!(t.scalar(o).abs() < 1e-6);

    // Exact 0 and 1 are clamped rather than producing infinities.
    let mut t = Tape::new();
    let r = t.variable(vec![0.0, 1.0], &[2, 1]).unwrap();
    let f = t.variable(vec![1.0, 0.0], &[2, 1]).unwrap();
    let (o, _) = loss_adv(&mut t, r, f).unwrap();
    assert!(t.scalar(o).is_finite());
    let g = t.backward(o).unwrap();
    assert!(g.wrt(r).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn centre_loss_examples() {
    let centers = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    let eval = |emb: Vec<f64>, labels: &[usize]| {
        let mut t = Tape::new();
        let e = t.constant(emb, &[labels.len(), 2]).unwrap();
        let l = centre_loss(&mut t, e, &centers, labels).unwrap();
        t.scalar(l)
    };
    assert_eq!(eval(vec![0.0, 0.0, 1.0, 1.0], &[0, 1]), 0.0);
    assert_eq!(eval(vec![2.0, 0.0], &[0]), 4.0);
    // Squared distances 1 and 3.
    assert!((eval(vec![1.0, 0.0, 2.0, 1.0 + 2f64.sqrt()], &[0, 1]) - 2.0).abs() < 1e-15);
    let mut t = Tape::new();
    let e = t.constant(vec![0.0, 0.0], &[1, 2]).unwrap();
    assert_eq!(centre_loss(&mut t, e, &centers, &[5]).err(), Some(NnError::UnknownLabel(5)));
}

#[test]
fn total_loss_weights() {
    let cfg = TrainConfig::default();
    let parts = LossParts { gen: 1.0, adv_global: 1.0, adv_local: 1.0, id: 1.0 };
    assert!((loss_total(&parts, &cfg) - 1.051).abs() < 1e-15);
    assert_eq!(loss_total(&LossParts::default(), &cfg), 0.0);
}

/// With `lambda3 = 0` the identity path contributes exactly nothing to the
/// generator gradient.
#[test]
fn zero_identity_weight_cuts_the_embedder_path() {
    let g = GeneratorNet::with_widths(6, &[4, 4], 3);
    let mut e = EmbedNet::new(2, 4, 1);
    e.freeze();
    e.centers = vec![vec![0.3; 4], vec![-0.1; 4]];
    let map = Rc::new(SparseMap { input_len: 32 * 32, rows: (0..32 * 32).map(|i| vec![(i as u32, 1.0)]).collect() });
    let mut r = rng::seeded(2);
    let input: Vec<f64> = (0..6 * 32 * 32).map(|_| rng::unit(&mut r)).collect();
    let target: Vec<f64> = (0..3 * 32 * 32).map(|_| rng::unit(&mut r)).collect();
    let cfg = TrainConfig { lambda3: 0.0, ..TrainConfig::default() };
    let grads_with = |use_id: bool| {
        let mut t = Tape::new();
        let x = t.constant(input.clone(), &[1, 6, 32, 32]).unwrap();
        let fake = g.forward(&mut t, x, true).unwrap();
        let real = t.constant(target.clone(), &[1, 3, 32, 32]).unwrap();
        let lg = loss_gen(&mut t, fake, real).unwrap();
        let zero = t.constant(vec![0.0], &[1]).unwrap();
        let id = if use_id {
            let v = t.gather(fake, vec![map.clone()]).unwrap();
            let v = t.reshape(v, &[1, 3, 32, 32]).unwrap();
            Some(loss_id(&mut t, &e, v, &[1]).unwrap())
        } else {
            None
        };
        let total = losses::loss_total_var(&mut t, lg, zero, zero, id, &cfg).unwrap();
        t.backward(total).unwrap().into_params()
    };
    let a = grads_with(true);
    let b = grads_with(false);
    assert_eq!(a.len(), b.len());
    for (id, ga) in &a {
        assert_eq!(ga, &b[id], "{id:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_keeps_spatial_shape(k in 4usize..7, seed in any::<u64>()) {
        let side = 1 << k;
        let g = GeneratorNet::new(seed);
        let mut t = Tape::new();
        let mut r = rng::seeded(seed);
        let x = t.constant((0..6 * side * side).map(|_| rng::unit(&mut r)).collect(), &[1, 6, side, side]).unwrap();
        let y = g.forward(&mut t, x, false).unwrap();
        prop_assert_eq!(t.shape(y), &[1, 3, side, side]);
        prop_assert!(t.value(y).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mirrored_input_swaps_halves(seed in any::<u64>()) {
        let (w, h) = (8, 6);
        let mut r = rng::seeded(seed);
        let uv = Image::from_fn(w, h, |_, _| [rng::unit(&mut r), rng::unit(&mut r), rng::unit(&mut r)]);
        let mask = VisibilityMask::from_fn(w, h, |x, y| (x * 7 + y * 3 + seed as usize) % 4 != 0);
        let input = make_generator_input(&uv, &mask, seed).unwrap();
        let plane = w * h;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mirrored = input[c * plane + y * w + (w - 1 - x)];
                    prop_assert_eq!(input[(c + 3) * plane + y * w + x], mirrored);
                }
            }
        }
    }
}

#[test]
fn composite_completion_keeps_visible_texels() {
    let g = GeneratorNet::new(4);
    let mut r = rng::seeded(1);
    let uv = Image::from_fn(32, 32, |_, _| [rng::unit(&mut r), rng::unit(&mut r), rng::unit(&mut r)]);
    let full = VisibilityMask::new(32, 32, true);
    assert_eq!(complete(&g, &uv, &full, 9, true).unwrap(), uv);
    let none = VisibilityMask::new(32, 32, false);
    let out = complete(&g, &uv, &none, 9, false).unwrap();
    assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

fn toy_samples(model: &MorphableModel, n: usize, side: usize) -> Vec<TrainSample> {
    (0..n)
        .map(|i| {
            let mut p = sample_identity(model, 40 + i as u64);
            p.camera = Camera::frontal(64, 64).with_yaw((-60.0 + 40.0 * i as f64).to_radians());
            let colors = instantiate_texture(model, &p.lambda).unwrap();
            let gt = bake_texture(model, &colors, side, side);
            let img = render(model, &p, &gt, 64, 64).unwrap().image;
            let (observed, mask) = extract_uv(&img, model, &p, side, side).unwrap();
            let frontal = FitParams { camera: Camera::frontal(32, 32), ..p.clone() };
            let view = identity_view(&RenderMap::build(model, &frontal, 32, 32).unwrap(), side, side).unwrap();
            TrainSample { observed, mask, target: gt, label: i % 2, identity_view: Some(Rc::new(view)) }
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_leaves_embedder_frozen() {
    let model = make_synthetic_model(5, 800, 6, 6).unwrap();
    let data = toy_samples(&model, 4, 16);
    let mut e = EmbedNet::new(2, 8, 3);
    e.centers = vec![vec![0.1; 8], vec![-0.2; 8]];
    let mut gan = UvGan::new(16, 0.5, 1).unwrap();
    assert_eq!(train(&mut gan, Some(&e), &data, &TrainConfig { epochs: 1, ..TrainConfig::default() }).err(), Some(NnError::EmbedderNotFrozen));
    e.freeze();
    let before = e.store.fingerprint();
    let cfg = TrainConfig { epochs: 2, batch_size: 2, optimizer: OptimizerKind::Adam, learning_rate: 1e-3, seed: 5, ..TrainConfig::default() };
    let run = || {
        let mut gan = UvGan::new(16, 0.5, 1).unwrap();
        let out = train(&mut gan, Some(&e), &data, &cfg).unwrap();
        (out, gan.generator.store.fingerprint())
    };
    let (a, fa) = run();
    let (b, fb) = run();
    assert_eq!(a.steps, 4);
    assert_eq!(a.curves.len(), 2);
    assert!(a.last.id > 0.0);
    assert_eq!(a.last_total.to_bits(), b.last_total.to_bits());
    assert_eq!(fa, fb);
    assert_eq!(e.store.fingerprint(), before);
}

#[test]
fn divergence_is_reported_with_its_epoch() {
    let model = make_synthetic_model(5, 800, 6, 6).unwrap();
    let data = toy_samples(&model, 2, 16);
    let mut gan = UvGan::new(16, 0.5, 1).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 2, learning_rate: 1e300, ..TrainConfig::default() };
    let err = train(&mut gan, None, &data, &cfg).unwrap_err();
    assert!(matches!(err, NnError::Diverged { .. }), "{err:?}");
    assert_eq!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate(), Err(NnError::InvalidConfig));
}

#[test]
fn discriminator_separates_real_from_noise() {
    let model = make_synthetic_model(5, 800, 6, 6).unwrap();
    let side = 16;
    let mut r = rng::seeded(8);
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for i in 0..16u64 {
        let p = sample_identity(&model, i);
        let colors = instantiate_texture(&model, &p.lambda).unwrap();
        let uv = image_to_planar(&bake_texture(&model, &colors, side, side));
        let mut x = uv.clone();
        x.extend_from_slice(&uv);
        real.push(x);
        let noise: Vec<f64> = (0..3 * side * side).map(|_| rng::unit(&mut r)).collect();
        let mut y = noise;
        y.extend_from_slice(&uv);
        fake.push(y);
    }
    let mut d = DiscriminatorNet::global(side, 2).unwrap();
    fit_discriminator(&mut d, &real, &fake, 60, OptimizerKind::Sgd, 1e-2, 8).unwrap();
    assert!(discriminator_accuracy(&d, &real, &fake).unwrap() >= 0.95);
}

#[test]
fn embedder_learns_synthetic_identities() {
    let model = make_synthetic_model(2024, 2000, 20, 20).unwrap();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for id in 0..10usize {
        let p = sample_identity(&model, 500 + id as u64);
        let colors = instantiate_texture(&model, &p.lambda).unwrap();
        let uv = bake_texture(&model, &colors, 64, 64);
        let mut r = rng::seeded(id as u64);
        for _ in 0..30 {
            let yaw = rng::uniform(&mut r, -90.0, 90.0);
            let q = FitParams { camera: p.camera.with_yaw(yaw.to_radians()), ..p.clone() };
            images.push(render(&model, &q, &uv, 128, 128).unwrap().image);
            labels.push(id);
        }
    }
    let (net, accuracy) = pretrain_embedder(&images, &labels, 10, &EmbedderConfig::default()).unwrap();
    assert!(accuracy >= 0.95, "train accuracy {accuracy}");
    assert!(net.is_frozen());
    let again = compute_centers(&net, &images, &labels).unwrap();
    for (a, b) in again.iter().flatten().zip(net.centers.iter().flatten()) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(pretrain_embedder(&images, &labels, 1, &EmbedderConfig::default()).is_err());
}
