//! Adversarial training of the completion networks, embedder pretraining and
//! test-time completion.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::losses::{centre_loss, discriminator_objective, generator_surrogate, loss_gen, loss_id, loss_total_var, LossParts};
use super::nets::{image_to_planar, planar_to_image, DiscriminatorNet, EmbedNet, GeneratorNet, EMBED_DIM, EMBED_SIDE};
use super::optim::{Optimizer, OptimizerKind};
use super::tape::{SparseMap, Tape, Var};
use super::NnError;
use crate::image::{Image, UvMap};
use crate::raster::RenderMap;
use crate::rng;
use crate::uv::{central_crop_rect, make_generator_input, masked_uv, VisibilityMask};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Stop after this many generator steps, if set.
    pub max_steps: Option<usize>,
    /// Side of the local discriminator's central crop relative to the UV side.
    pub crop_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            lambda1: 1e-2,
            lambda2: 4e-2,
            lambda3: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            max_steps: None,
            crop_ratio: 0.5,
        }
    }
}

impl TrainConfig {
    /// Plain gradient descent at lr 1e-4. Far too slow for the toy nets;
    /// kept for comparison runs.
    pub fn plain_sgd() -> Self {
        Self { learning_rate: 1e-4, optimizer: OptimizerKind::Sgd, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && [self.lambda1, self.lambda2, self.lambda3].iter().all(|l| *l >= 0.0 && l.is_finite())
            && self.crop_ratio > 0.0
            && self.crop_ratio <= 1.0
            && self.max_steps != Some(0);
        if ok {
            Ok(())
        } else {
            Err(NnError::InvalidConfig)
        }
    }
}

/// One training example: the observed incomplete UV with its visibility
/// mask, the complete ground truth and the identity label. `identity_view`
/// maps UV texels to the pooled frontal render used by the identity loss.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub observed: UvMap,
    pub mask: VisibilityMask,
    pub target: UvMap,
    pub label: usize,
    pub identity_view: Option<Rc<SparseMap>>,
}

/// Sparse map from UV texels to the 32x32 frontal view seen by the embedder.
pub fn identity_view(render: &RenderMap, uv_width: usize, uv_height: usize) -> Result<SparseMap, NnError> {
    if render.width() != render.height() || render.width() % EMBED_SIDE != 0 {
        return Err(NnError::Shape(alloc::format!("render map {}x{} cannot pool to {EMBED_SIDE}", render.width(), render.height())));
    }
    let rows = render
        .texel_weights(uv_width, uv_height, render.width() / EMBED_SIDE)
        .into_iter()
        .map(|r| r.into_iter().map(|(i, w)| (i as u32, w)).collect())
        .collect();
    Ok(SparseMap { input_len: uv_width * uv_height, rows })
}

/// The generator and its two discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct UvGan {
    pub generator: GeneratorNet,
    pub global_d: DiscriminatorNet,
    pub local_d: DiscriminatorNet,
}

impl UvGan {
    pub fn new(side: usize, crop_ratio: f64, seed: u64) -> Result<Self, NnError> {
        let (_, _, crop) = central_crop_rect(side, side, crop_ratio)?;
        Ok(Self {
            generator: GeneratorNet::new(rng::derive_seed(seed, 1)),
            global_d: DiscriminatorNet::global(side, rng::derive_seed(seed, 2))?,
            local_d: DiscriminatorNet::local(crop, rng::derive_seed(seed, 3))?,
        })
    }
}

/// Per-epoch means of the batch losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub gen: f64,
    pub adv_global: f64,
    pub adv_local: f64,
    pub id: f64,
    pub total: f64,
    /// Discriminator objective (global + local), for monitoring.
    pub disc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub curves: Vec<LossRecord>,
    pub steps: usize,
    /// Losses of the last generator step.
    pub last: LossParts,
    pub last_total: f64,
}

struct Prepared {
    target: Vec<f64>,
    condition: Vec<f64>,
}

fn noise_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, 0x5EED_0000 + epoch as u64), index as u64)
}

/// Alternating training: per batch one update of both discriminators, then
/// one generator update on `L_gen + l1 L_adv_g + l2 L_adv_l + l3 L_id`. The
/// identity term is used when an embedder is given and every sample in the
/// batch carries an identity view.
pub fn train(gan: &mut UvGan, embedder: Option<&EmbedNet>, data: &[TrainSample], config: &TrainConfig) -> Result<TrainOutcome, NnError> {
    config.validate()?;
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let (w, h) = data[0].target.dims();
    if data.iter().any(|s| s.target.dims() != (w, h) || s.observed.dims() != (w, h)) {
        return Err(NnError::Shape("training samples differ in size".into()));
    }
    if w != h || gan.global_d.side() != w {
        return Err(NnError::Shape(alloc::format!("UV {w}x{h} does not match discriminator side {}", gan.global_d.side())));
    }
    let (left, top, crop) = central_crop_rect(w, h, config.crop_ratio)?;
    if gan.local_d.side() != crop {
        return Err(NnError::Shape(alloc::format!("crop side {crop} does not match local discriminator {}", gan.local_d.side())));
    }
    if let Some(e) = embedder {
        if !e.is_frozen() {
            return Err(NnError::EmbedderNotFrozen);
        }
        if let Some(s) = data.iter().find(|s| s.label >= e.n_classes()) {
            return Err(NnError::UnknownLabel(s.label));
        }
    }
    let prepared: Vec<Prepared> = data
        .iter()
        .map(|s| Ok(Prepared { target: image_to_planar(&s.target), condition: image_to_planar(&masked_uv(&s.observed, &s.mask)?) }))
        .collect::<Result<_, NnError>>()?;

    let mut opt_g = Optimizer::new(config.optimizer, config.learning_rate);
    let mut opt_dg = Optimizer::new(config.optimizer, config.learning_rate);
    let mut opt_dl = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curves = Vec::new();
    let mut steps = 0usize;
    let mut last = LossParts::default();
    let mut last_total = 0.0;
    let plane = w * h;

    'epochs: for epoch in 0..config.epochs {
        let mut shuffle_rng = rng::seeded(rng::derive_seed(config.seed, 0xE000_0000 + epoch as u64));
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let n = batch.len();
            let mut input = Vec::with_capacity(n * 6 * plane);
            let mut target = Vec::with_capacity(n * 3 * plane);
            let mut condition = Vec::with_capacity(n * 3 * plane);
            for &i in batch {
                input.extend(make_generator_input(&data[i].observed, &data[i].mask, noise_seed(config.seed, epoch, i))?);
                target.extend_from_slice(&prepared[i].target);
                condition.extend_from_slice(&prepared[i].condition);
            }

            let mut tape = Tape::new();
            let x = tape.constant(input, &[n, 6, h, w])?;
            let fake = gan.generator.forward(&mut tape, x, true)?;
            let fake_values = tape.value(fake).to_vec();

            // Discriminator update on detached fakes.
            let disc = {
                let mut dt = Tape::new();
                let real = dt.constant(target.clone(), &[n, 3, h, w])?;
                let cond = dt.constant(condition.clone(), &[n, 3, h, w])?;
                let fk = dt.constant(fake_values, &[n, 3, h, w])?;
                let (og, ol) = disc_objectives(&mut dt, gan, real, fk, cond, (top, left, crop))?;
                let sum = dt.add(og, ol)?;
                let loss = dt.affine(sum, -1.0, 0.0)?;
                let value = dt.scalar(sum);
                let grads = dt.backward(loss)?;
                opt_dg.step(&mut gan.global_d.store, grads.params());
                opt_dl.step(&mut gan.local_d.store, grads.params());
                value
            };
            if !disc.is_finite() || !gan.global_d.store.all_finite() || !gan.local_d.store.all_finite() || !tape.value(fake).iter().all(|v| v.is_finite()) {
                return Err(NnError::Diverged { epoch, step: steps });
            }

            // Generator update against the refreshed discriminators.
            let real = tape.constant(target, &[n, 3, h, w])?;
            let cond = tape.constant(condition, &[n, 3, h, w])?;
            let l_gen = loss_gen(&mut tape, fake, real)?;
            let pg = {
                let joined = tape.concat_channels(fake, cond)?;
                gan.global_d.forward(&mut tape, joined, false)?
            };
            let adv_g = generator_surrogate(&mut tape, pg)?;
            let pl = {
                let fc = tape.crop(fake, top, left, crop, crop)?;
                let cc = tape.crop(cond, top, left, crop, crop)?;
                let joined = tape.concat_channels(fc, cc)?;
                gan.local_d.forward(&mut tape, joined, false)?
            };
            let adv_l = generator_surrogate(&mut tape, pl)?;
            let id = match embedder {
                Some(e) if batch.iter().all(|&i| data[i].identity_view.is_some()) => {
                    let maps: Vec<Rc<SparseMap>> = batch.iter().map(|&i| data[i].identity_view.clone().unwrap()).collect();
                    let g = tape.gather(fake, maps)?;
                    let view = tape.reshape(g, &[n, 3, EMBED_SIDE, EMBED_SIDE])?;
                    let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
                    Some(loss_id(&mut tape, e, view, &labels)?)
                }
                _ => None,
            };
            let total = loss_total_var(&mut tape, l_gen, adv_g, adv_l, id, config)?;
            let parts = LossParts {
                gen: tape.scalar(l_gen),
                adv_global: tape.scalar(adv_g),
                adv_local: tape.scalar(adv_l),
                id: id.map_or(0.0, |v| tape.scalar(v)),
            };
            let total_value = tape.scalar(total);
            if !total_value.is_finite() || !disc.is_finite() {
                return Err(NnError::Diverged { epoch, step: steps });
            }
            let grads = tape.backward(total)?;
            opt_g.step(&mut gan.generator.store, grads.params());
            if !gan.generator.store.all_finite() || !gan.global_d.store.all_finite() || !gan.local_d.store.all_finite() {
                return Err(NnError::Diverged { epoch, step: steps });
            }

            steps += 1;
            batches += 1;
            for (s, v) in sums.iter_mut().zip([parts.gen, parts.adv_global, parts.adv_local, parts.id, total_value, disc]) {
                *s += v;
            }
            last = parts;
            last_total = total_value;
        }
        if batches > 0 {
            let m = |i: usize| sums[i] / batches as f64;
            curves.push(LossRecord { epoch, gen: m(0), adv_global: m(1), adv_local: m(2), id: m(3), total: m(4), disc: m(5) });
        }
        if config.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }
    Ok(TrainOutcome { curves, steps, last, last_total })
}

fn disc_objectives(
    tape: &mut Tape,
    gan: &UvGan,
    real: Var,
    fake: Var,
    cond: Var,
    (top, left, crop): (usize, usize, usize),
) -> Result<(Var, Var), NnError> {
    let jr = tape.concat_channels(real, cond)?;
    let jf = tape.concat_channels(fake, cond)?;
    let dr = gan.global_d.forward(tape, jr, true)?;
    let df = gan.global_d.forward(tape, jf, true)?;
    let og = discriminator_objective(tape, dr, df)?;
    let rc = tape.crop(real, top, left, crop, crop)?;
    let fc = tape.crop(fake, top, left, crop, crop)?;
    let cc = tape.crop(cond, top, left, crop, crop)?;
    let jr = tape.concat_channels(rc, cc)?;
    let jf = tape.concat_channels(fc, cc)?;
    let dr = gan.local_d.forward(tape, jr, true)?;
    let df = gan.local_d.forward(tape, jf, true)?;
    let ol = discriminator_objective(tape, dr, df)?;
    Ok((og, ol))
}

/// Runs the generator on one incomplete UV. With `composite`, visible texels
/// are copied back from the input.
pub fn complete(generator: &GeneratorNet, uv: &UvMap, mask: &VisibilityMask, seed: u64, composite: bool) -> Result<UvMap, NnError> {
    let (w, h) = uv.dims();
    let input = make_generator_input(uv, mask, seed)?;
    let mut tape = Tape::new();
    let x = tape.constant(input, &[1, 6, h, w])?;
    let y = generator.forward(&mut tape, x, false)?;
    let mut out = planar_to_image(tape.value(y), w, h);
    if composite {
        for yy in 0..h {
            for xx in 0..w {
                if mask.get(xx, yy) {
                    out.set(xx, yy, uv.get(xx, yy));
                }
            }
        }
    }
    Ok(out)
}

/// Trains one discriminator to separate `real` from `fake` 6-channel inputs
/// (planar `[6, side, side]` each). Returns the objective per step.
pub fn fit_discriminator(
    d: &mut DiscriminatorNet,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    steps: usize,
    kind: OptimizerKind,
    lr: f64,
    batch_size: usize,
) -> Result<Vec<f64>, NnError> {
    if real.is_empty() || fake.is_empty() || batch_size == 0 {
        return Err(NnError::EmptyDataset);
    }
    let side = d.side();
    let mut opt = Optimizer::new(kind, lr);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let pick = |set: &[Vec<f64>]| {
            let mut v = Vec::with_capacity(batch_size * 6 * side * side);
            for k in 0..batch_size {
                v.extend_from_slice(&set[(step * batch_size + k) % set.len()]);
            }
            v
        };
        let mut tape = Tape::new();
        let r = tape.constant(pick(real), &[batch_size, 6, side, side])?;
        let f = tape.constant(pick(fake), &[batch_size, 6, side, side])?;
        let dr = d.forward(&mut tape, r, true)?;
        let df = d.forward(&mut tape, f, true)?;
        let obj = discriminator_objective(&mut tape, dr, df)?;
        let loss = tape.affine(obj, -1.0, 0.0)?;
        history.push(tape.scalar(obj));
        let grads = tape.backward(loss)?;
        opt.step(&mut d.store, grads.params());
    }
    Ok(history)
}

/// Fraction of inputs on the right side of 0.5 (real above, fake below).
pub fn discriminator_accuracy(d: &DiscriminatorNet, real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64, NnError> {
    let side = d.side();
    let mut correct = 0usize;
    for (set, is_real) in [(real, true), (fake, false)] {
        for item in set {
            let mut tape = Tape::new();
            let x = tape.constant(item.clone(), &[1, 6, side, side])?;
            let p = d.forward(&mut tape, x, false)?;
            if (tape.scalar(p) > 0.5) == is_real {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (real.len() + fake.len()) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { steps: 400, batch_size: 32, learning_rate: 1e-3, dim: EMBED_DIM, seed: 0 }
    }
}

/// Minimum train accuracy accepted on a set of at least ten classes.
pub const EMBEDDER_MIN_ACCURACY: f64 = 0.9;

/// Softmax pretraining of the identity embedder on labelled renders, then
/// class centres as mean embeddings, then freezing. Returns the embedder and
/// its final train accuracy.
pub fn pretrain_embedder(images: &[Image], labels: &[usize], n_classes: usize, config: &EmbedderConfig) -> Result<(EmbedNet, f64), NnError> {
    if n_classes < 2 {
        return Err(NnError::TooFewClasses(n_classes));
    }
    if images.is_empty() || images.len() != labels.len() || config.batch_size == 0 {
        return Err(NnError::EmptyDataset);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(NnError::UnknownLabel(bad));
    }
    let views: Vec<Vec<f64>> = images
        .iter()
        .map(|img| super::nets::embedder_view(img).map(|v| image_to_planar(&v)))
        .collect::<Result<_, _>>()?;
    let mut net = EmbedNet::new(n_classes, config.dim, config.seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.learning_rate);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut r = rng::seeded(rng::derive_seed(config.seed, 0xE3B0));
    let mut cursor = order.len();
    let plane = 3 * EMBED_SIDE * EMBED_SIDE;
    for _ in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size.min(order.len()) {
            if cursor == order.len() {
                rng::shuffle(&mut r, &mut order);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mut input = Vec::with_capacity(idx.len() * plane);
        for &i in &idx {
            input.extend_from_slice(&views[i]);
        }
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(input, &[idx.len(), 3, EMBED_SIDE, EMBED_SIDE])?;
        let e = net.embed(&mut tape, x, true)?;
        let l = net.logits(&mut tape, e, true)?;
        let loss = tape.softmax_cross_entropy(l, &batch_labels)?;
        if !tape.scalar(loss).is_finite() {
            return Err(NnError::Diverged { epoch: 0, step: opt.steps() as usize });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut net.store, grads.params());
    }
    let predicted = net.classify(images)?;
    let accuracy = predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    if n_classes >= 10 && accuracy < EMBEDDER_MIN_ACCURACY {
        return Err(NnError::NotConverged(accuracy));
    }
    net.centers = compute_centers(&net, images, labels)?;
    net.freeze();
    Ok((net, accuracy))
}

/// Mean embedding per class; classes without images get a zero centre.
pub fn compute_centers(net: &EmbedNet, images: &[Image], labels: &[usize]) -> Result<Vec<Vec<f64>>, NnError> {
    let emb = net.embed_images(images)?;
    let mut centers = vec![vec![0.0; net.dim()]; net.n_classes()];
    let mut counts = vec![0usize; net.n_classes()];
    for (e, &l) in emb.iter().zip(labels) {
        let c = centers.get_mut(l).ok_or(NnError::UnknownLabel(l))?;
        c.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        counts[l] += 1;
    }
    for (c, &n) in centers.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(centers)
}

/// Centre loss of a batch of images (any side divisible by 32) against the
/// embedder's stored centres.
pub fn image_centre_loss(net: &EmbedNet, images: &[Image], labels: &[usize]) -> Result<f64, NnError> {
    let mut input = Vec::new();
    for img in images {
        input.extend(image_to_planar(&super::nets::embedder_view(img)?));
    }
    let mut tape = Tape::new();
    let x = tape.constant(input, &[images.len(), 3, EMBED_SIDE, EMBED_SIDE])?;
    let e = net.embed(&mut tape, x, false)?;
    let l = centre_loss(&mut tape, e, &net.centers, labels)?;
    Ok(tape.scalar(l))
}
