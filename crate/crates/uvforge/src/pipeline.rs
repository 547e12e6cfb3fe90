//! Stage functions and the end-to-end experiment: fit, extract, train,
//! complete, synthesize, evaluate.

use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;
use uvforge_core::fit::{gauss_newton_fit, initialize_from_landmarks, landmark_rmse, FitReport, Landmarks};
use uvforge_core::image::{Image, UvMap};
use uvforge_core::metrics;
use uvforge_core::model::{make_synthetic_model, Camera, FitParams, MorphableModel};
use uvforge_core::nn::train::identity_view;
use uvforge_core::nn::{complete, pretrain_embedder, train, EmbedNet, EmbedderConfig, GeneratorNet, TrainOutcome, TrainSample, UvGan};
use uvforge_core::raster::RenderMap;
use uvforge_core::recognition::{
    diagonal_contrast, mean_pose_similarity, synthesize_views, template_similarity, verification_accuracy, yaw_grid, Template,
    VerificationReport, ViewRequest,
};
use uvforge_core::rng::{self, derive_seed};
use uvforge_core::uv::{extract_uv, mask_fraction, noise_filled, poisson_blend, VisibilityMask};

use crate::config::{EvalConfig, FitConfig, PipelineConfig};
use crate::dataset::{self, DatasetManifest, Split};
use crate::formats::{self, Checkpoint, Report};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Model,
    Data,
    Fit,
    Extract,
    Embed,
    Train,
    Complete,
    Synthesize,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Model => "model",
            Stage::Data => "data",
            Stage::Fit => "fit",
            Stage::Extract => "extract",
            Stage::Embed => "embed",
            Stage::Train => "train",
            Stage::Complete => "complete",
            Stage::Synthesize => "synthesize",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: fmt::Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError { stage, message: e.to_string() })
    }
}

fn fail<T>(stage: Stage, message: impl Into<String>) -> Result<T, PipelineError> {
    Err(PipelineError { stage, message: message.into() })
}

fn progress(msg: &str, started: Instant) {
    eprintln!("[{:7.1}s] {msg}", started.elapsed().as_secs_f64());
}

/// Landmark initialisation followed by the full fit.
pub fn fit_image(model: &MorphableModel, image: &Image, landmarks: &Landmarks, cfg: &FitConfig) -> Result<FitReport, PipelineError> {
    let init = initialize_from_landmarks(image, landmarks, model, &cfg.weights).stage(Stage::Fit)?;
    let report = gauss_newton_fit(image, landmarks, model, &init, &cfg.weights, cfg.iterations, cfg.tolerance).stage(Stage::Fit)?;
    if !report.params.is_finite() {
        return fail(Stage::Fit, "fit produced non-finite parameters");
    }
    Ok(report)
}

/// Frontal identity view of a fitted shape for the identity loss.
pub fn identity_map(model: &MorphableModel, params: &FitParams, image_size: usize, uv_size: usize) -> Result<Rc<uvforge_core::nn::SparseMap>, PipelineError> {
    let frontal = FitParams { camera: Camera::frontal(image_size, image_size), ..params.clone() };
    let map = RenderMap::build(model, &frontal, image_size, image_size).stage(Stage::Extract)?;
    Ok(Rc::new(identity_view(&map, uv_size, uv_size).stage(Stage::Extract)?))
}

/// One manifest record after fitting and extraction.
#[derive(Clone, Debug)]
pub struct ProcessedSample {
    pub identity: usize,
    pub view: usize,
    pub yaw: f64,
    pub split: Split,
    pub params: FitParams,
    pub rmse: f64,
    pub converged: bool,
    pub observed: UvMap,
    pub mask: VisibilityMask,
    pub target: UvMap,
}

impl ProcessedSample {
    pub fn stem(&self) -> String {
        format!("id{:04}_v{:02}", self.identity, self.view)
    }
}

/// Fits and extracts every record of `split`, writing fitted parameters,
/// observed UVs and masks under `out` when given.
pub fn process_split(
    model: &MorphableModel,
    manifest: &DatasetManifest,
    split: Split,
    fit: &FitConfig,
    uv_size: usize,
    out: Option<&Path>,
) -> Result<Vec<ProcessedSample>, PipelineError> {
    let mut samples = Vec::new();
    for r in manifest.split(split) {
        let loaded = manifest.load(r).stage(Stage::Data)?;
        let report = fit_image(model, &loaded.image, &loaded.landmarks, fit)?;
        let rmse = landmark_rmse(model, &report.params, &loaded.landmarks).stage(Stage::Fit)?;
        let (observed, mask) = extract_uv(&loaded.image, model, &report.params, uv_size, uv_size).stage(Stage::Extract)?;
        if loaded.uv.dims() != (uv_size, uv_size) {
            return fail(Stage::Extract, format!("ground-truth UV {} is not {uv_size}x{uv_size}", r.uv.display()));
        }
        let s = ProcessedSample {
            identity: r.identity,
            view: r.view,
            yaw: r.yaw,
            split,
            params: report.params,
            rmse,
            converged: report.converged,
            observed,
            mask,
            target: loaded.uv,
        };
        if let Some(dir) = out {
            formats::write_params(&dir.join("fits").join(format!("{}.txt", s.stem())), &s.params).stage(Stage::Fit)?;
            formats::write_ppm(&dir.join("extract").join(format!("{}.ppm", s.stem())), &s.observed).stage(Stage::Extract)?;
            formats::write_mask(&dir.join("extract").join(format!("{}_mask.pgm", s.stem())), &s.mask).stage(Stage::Extract)?;
        }
        samples.push(s);
    }
    Ok(samples)
}

/// Identity seeds of the embedder's extra pretraining pool.
fn pool_seed(seed: u64) -> u64 {
    derive_seed(seed, 0x9001_0000)
}

/// Softmax pretraining on the dataset's training images (one class per
/// training identity) plus `pool` extra synthetic identities rendered at
/// random yaws. Returns the frozen embedder and its train accuracy.
pub fn pretrain_identity_embedder(
    model: &MorphableModel,
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
) -> Result<(EmbedNet, f64), PipelineError> {
    let train_ids = manifest.identities(Split::Train);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for r in manifest.split(Split::Train) {
        let img = formats::read_ppm(&manifest.root.join(&r.image)).stage(Stage::Data)?;
        images.push(img);
        labels.push(r.identity);
    }
    let base = train_ids.iter().max().map_or(0, |m| m + 1);
    let size = cfg.data.image_size;
    for k in 0..cfg.embed.pool_identities {
        let (params, uv) = dataset::identity(model, pool_seed(cfg.seed), k, size, cfg.data.uv_size).stage(Stage::Embed)?;
        let mut r = rng::seeded(derive_seed(pool_seed(cfg.seed), 0x100_0000 + k as u64));
        for _ in 0..cfg.embed.renders_per_class {
            let yaw = rng::uniform(&mut r, -90.0, 90.0);
            images.push(dataset::render_view(model, &params, &uv, yaw, size).stage(Stage::Embed)?.1);
            labels.push(base + k);
        }
    }
    let ec = EmbedderConfig {
        steps: cfg.embed.steps,
        batch_size: cfg.embed.batch_size,
        learning_rate: cfg.embed.learning_rate,
        dim: cfg.embed.dim,
        seed: derive_seed(cfg.seed, 0xE4B),
    };
    pretrain_embedder(&images, &labels, base + cfg.embed.pool_identities, &ec).stage(Stage::Embed)
}

pub fn train_samples(model: &MorphableModel, samples: &[ProcessedSample], image_size: usize, uv_size: usize) -> Result<Vec<TrainSample>, PipelineError> {
    samples
        .iter()
        .map(|s| {
            Ok(TrainSample {
                observed: s.observed.clone(),
                mask: s.mask.clone(),
                target: s.target.clone(),
                label: s.identity,
                identity_view: Some(identity_map(model, &s.params, image_size, uv_size)?),
            })
        })
        .collect()
}

pub fn loss_curve_rows(outcome: &TrainOutcome) -> Vec<Vec<String>> {
    outcome
        .curves
        .iter()
        .map(|c| {
            [c.gen, c.adv_global, c.adv_local, c.id, c.total].iter().fold(vec![c.epoch.to_string()], |mut row, v| {
                row.push(format!("{v:?}"));
                row
            })
        })
        .collect()
}

pub const LOSS_CURVE_HEADER: [&str; 6] = ["epoch", "L_gen", "L_adv_g", "L_adv_l", "L_id", "L_total"];

/// Trains the completion networks; the checkpoint carries the embedder.
pub fn train_stage(
    model: &MorphableModel,
    train_set: &[ProcessedSample],
    embedder: EmbedNet,
    cfg: &PipelineConfig,
) -> Result<(Checkpoint, TrainOutcome), PipelineError> {
    let data = train_samples(model, train_set, cfg.data.image_size, cfg.data.uv_size)?;
    let mut gan = UvGan::new(cfg.data.uv_size, cfg.train.crop_ratio, derive_seed(cfg.train.seed, 0x6A11)).stage(Stage::Train)?;
    let outcome = train(&mut gan, Some(&embedder), &data, &cfg.train).stage(Stage::Train)?;
    let ck = Checkpoint {
        gan,
        embedder: Some(embedder),
        seed: cfg.train.seed,
        steps: outcome.steps,
        side: cfg.data.uv_size,
        crop_ratio: cfg.train.crop_ratio,
    };
    Ok((ck, outcome))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Quality of completed UVs against ground truth, next to the noise-filled
/// input and the Poisson-blended completion.
#[derive(Clone, Debug, Default)]
pub struct CompletionSummary {
    pub psnr_completed: Vec<f64>,
    pub psnr_noise: Vec<f64>,
    pub psnr_blended: Vec<f64>,
    pub ssim_completed: Vec<f64>,
    pub ssim_noise: Vec<f64>,
    pub missing_fraction: Vec<f64>,
}

impl CompletionSummary {
    fn push(&mut self, generator: &GeneratorNet, observed: &UvMap, mask: &VisibilityMask, target: &UvMap, seed: u64) -> Result<UvMap, PipelineError> {
        let raw = complete(generator, observed, mask, seed, false).stage(Stage::Complete)?;
        let completed = complete(generator, observed, mask, seed, true).stage(Stage::Complete)?;
        let noisy = noise_filled(observed, mask, seed).stage(Stage::Complete)?;
        // Interior missing texels take the raw generator gradients; boundary
        // values come from the composite (observed texels, and generator
        // values on the border ring).
        let (w, h) = (mask.width(), mask.height());
        let region = VisibilityMask::from_fn(w, h, |x, y| !mask.get(x, y) && x > 0 && y > 0 && x + 1 < w && y + 1 < h);
        let blended = if region.visible_count() > 0 { poisson_blend(&raw, &completed, &region).stage(Stage::Complete)? } else { completed.clone() };
        let psnr = |a: &Image| metrics::psnr(a, target, 1.0).stage(Stage::Complete);
        let ssim = |a: &Image| metrics::ssim(a, target).stage(Stage::Complete);
        self.psnr_completed.push(psnr(&completed)?);
        self.psnr_noise.push(psnr(&noisy)?);
        self.psnr_blended.push(psnr(&blended)?);
        self.ssim_completed.push(ssim(&completed)?);
        self.ssim_noise.push(ssim(&noisy)?);
        self.missing_fraction.push(mask_fraction(mask));
        Ok(completed)
    }

    fn write(&self, r: &mut Report, prefix: &str) {
        r.set(&format!("{prefix}samples"), self.psnr_completed.len());
        r.set_f64(&format!("{prefix}missing_fraction"), mean(&self.missing_fraction));
        r.set_f64(&format!("{prefix}psnr_completed"), mean(&self.psnr_completed));
        r.set_f64(&format!("{prefix}psnr_noise_filled"), mean(&self.psnr_noise));
        r.set_f64(&format!("{prefix}psnr_blended"), mean(&self.psnr_blended));
        r.set_f64(&format!("{prefix}ssim_completed"), mean(&self.ssim_completed));
        r.set_f64(&format!("{prefix}ssim_noise_filled"), mean(&self.ssim_noise));
    }
}

/// Nominal yaws of the frontal, three-quarter and profile pose groups.
pub const POSE_YAWS: [f64; 3] = [0.0, 45.0, 90.0];
pub const POSE_NAMES: [&str; 3] = ["frontal", "three_quarter", "profile"];

/// One benchmark image with its detector landmarks.
#[derive(Clone, Debug)]
pub struct BenchImage {
    pub identity: usize,
    pub pose: usize,
    /// 0 or 1: which of the two template sets it belongs to.
    pub set: usize,
    pub yaw: f64,
    pub image: Image,
    pub landmarks: Landmarks,
}

/// The recognition benchmark: identities disjoint from the completion
/// dataset and the embedder's classes.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub identities: usize,
    pub images: Vec<BenchImage>,
}

impl Benchmark {
    pub fn build(model: &MorphableModel, eval: &EvalConfig, image_size: usize, uv_size: usize) -> Result<Self, PipelineError> {
        let mut images = Vec::new();
        let mut r = rng::seeded(derive_seed(eval.seed, 0xBE7C));
        for id in 0..eval.identities {
            let (params, uv) = dataset::identity(model, derive_seed(eval.seed, 0x1D00), id, image_size, uv_size).stage(Stage::Evaluate)?;
            for (pose, &nominal) in POSE_YAWS.iter().enumerate() {
                for set in 0..2 {
                    for _ in 0..eval.images_per_pose {
                        let jitter = rng::uniform(&mut r, -eval.yaw_jitter, eval.yaw_jitter);
                        let side = if rng::unit(&mut r) < 0.5 { -1.0 } else { 1.0 };
                        let magnitude = if pose == 2 { nominal - jitter.abs() } else { (nominal + jitter).abs() };
                        let yaw = if pose == 0 { jitter } else { side * magnitude };
                        let (p, image) = dataset::render_view(model, &params, &uv, yaw, image_size).stage(Stage::Evaluate)?;
                        let landmarks = Landmarks::project(model, &p).stage(Stage::Evaluate)?;
                        images.push(BenchImage { identity: id, pose, set, yaw, image, landmarks });
                    }
                }
            }
        }
        Ok(Self { identities: eval.identities, images })
    }

    pub fn of(&self, identity: usize, pose: usize, set: usize) -> impl Iterator<Item = (usize, &BenchImage)> {
        self.images.iter().enumerate().filter(move |(_, b)| b.identity == identity && b.pose == pose && b.set == set)
    }

    /// Balanced frontal-profile pairs `(frontal index, profile index, same)`,
    /// shuffled in same/different blocks so contiguous folds stay balanced.
    pub fn frontal_profile_pairs(&self, seed: u64) -> Vec<(usize, usize, bool)> {
        let mut r = rng::seeded(derive_seed(seed, 0xFA125));
        let n = self.identities;
        let frontal: Vec<Vec<usize>> = (0..n).map(|i| self.images.iter().enumerate().filter(|(_, b)| b.identity == i && b.pose == 0).map(|(k, _)| k).collect()).collect();
        let profile: Vec<Vec<usize>> = (0..n).map(|i| self.images.iter().enumerate().filter(|(_, b)| b.identity == i && b.pose == 2).map(|(k, _)| k).collect()).collect();
        let mut blocks = Vec::new();
        for i in 0..n {
            for (m, &f) in frontal[i].iter().enumerate() {
                let offset = 1 + (rng::unit(&mut r) * (n - 1) as f64) as usize % (n - 1);
                let j = (i + offset) % n;
                blocks.push([(f, profile[i][m], true), (f, profile[j][m], false)]);
            }
        }
        rng::shuffle(&mut r, &mut blocks);
        blocks.into_iter().flatten().collect()
    }
}

/// Results of the recognition protocols.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub same_similarity: f64,
    pub cross_similarity: f64,
    pub pose_matrix: [[f64; 3]; 3],
    pub diagonal_mean: f64,
    pub off_diagonal_mean: f64,
    pub plain: VerificationReport,
    pub template: Option<VerificationReport>,
}

impl EvalOutcome {
    pub fn write(&self, r: &mut Report) {
        r.set_f64("eval.same_identity_similarity", self.same_similarity);
        r.set_f64("eval.cross_identity_similarity", self.cross_similarity);
        r.set_f64s("eval.pose_matrix", &self.pose_matrix.concat());
        r.set_f64("eval.pose_matrix_diagonal_mean", self.diagonal_mean);
        r.set_f64("eval.pose_matrix_off_diagonal_mean", self.off_diagonal_mean);
        r.set_f64("eval.plain_accuracy", self.plain.mean);
        r.set_f64("eval.plain_accuracy_std", self.plain.std);
        if let Some(t) = &self.template {
            r.set_f64("eval.template2template_accuracy", t.mean);
            r.set_f64("eval.template2template_accuracy_std", t.std);
        }
    }

    /// `protocol,fold,accuracy` rows.
    pub fn verification_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        let mut add = |name: &str, v: &VerificationReport| {
            for (k, a) in v.fold_accuracy.iter().enumerate() {
                rows.push(vec![name.to_string(), (k + 1).to_string(), format!("{a:?}")]);
            }
            rows.push(vec![name.to_string(), "mean".into(), format!("{:?}", v.mean)]);
            rows.push(vec![name.to_string(), "std".into(), format!("{:?}", v.std)]);
        };
        add("frontal-profile", &self.plain);
        if let Some(t) = &self.template {
            add("template2template", t);
        }
        rows
    }

    /// Labelled 3x3 grid.
    pub fn pose_grid(&self) -> String {
        let mut s = format!("{:>14}", "");
        for n in POSE_NAMES {
            s.push_str(&format!(" {n:>14}"));
        }
        s.push('\n');
        for (i, n) in POSE_NAMES.iter().enumerate() {
            s.push_str(&format!("{n:>14}"));
            for v in self.pose_matrix[i] {
                s.push_str(&format!(" {v:>14.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Template of the views synthesized from the completed UV of one image.
pub fn synthesized_template(
    model: &MorphableModel,
    embedder: &EmbedNet,
    generator: &GeneratorNet,
    image: &Image,
    landmarks: &Landmarks,
    fit: &FitConfig,
    uv_size: usize,
    yaw_step: f64,
    seed: u64,
) -> Result<Template, PipelineError> {
    let report = fit_image(model, image, landmarks, fit)?;
    let (observed, mask) = extract_uv(image, model, &report.params, uv_size, uv_size).stage(Stage::Extract)?;
    let completed = complete(generator, &observed, &mask, seed, true).stage(Stage::Complete)?;
    let views = synthesize_views(model, &report.params, &completed, &ViewRequest::Yaws(yaw_grid(yaw_step)), image.width(), image.height())
        .stage(Stage::Synthesize)?;
    Template::new(embedder, views.into_iter().map(|(v, _)| v).collect()).stage(Stage::Evaluate)
}

/// Recognition protocols on the benchmark. Template-to-template
/// verification runs when a generator is given.
pub fn evaluate(
    model: &MorphableModel,
    embedder: &EmbedNet,
    generator: Option<&GeneratorNet>,
    bench: &Benchmark,
    cfg: &PipelineConfig,
    started: Instant,
) -> Result<EvalOutcome, PipelineError> {
    let single: Vec<Template> = bench.images.iter().map(|b| Template::new(embedder, vec![b.image.clone()]).stage(Stage::Evaluate)).collect::<Result<_, _>>()?;
    // Per identity: the three pose templates of each set.
    let mut sets: Vec<[Vec<Template>; 2]> = Vec::new();
    for id in 0..bench.identities {
        let mut pair: [Vec<Template>; 2] = [Vec::new(), Vec::new()];
        for (set, slot) in pair.iter_mut().enumerate() {
            for pose in 0..3 {
                let imgs: Vec<Image> = bench.of(id, pose, set).map(|(_, b)| b.image.clone()).collect();
                slot.push(Template::new(embedder, imgs).stage(Stage::Evaluate)?);
            }
        }
        sets.push(pair);
    }
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for (i, a) in sets.iter().enumerate() {
        for (j, b) in sets.iter().enumerate() {
            for ta in &a[0] {
                for tb in &b[1] {
                    let s = template_similarity(ta, tb).stage(Stage::Evaluate)?;
                    if i == j { same.push(s) } else { cross.push(s) }
                }
            }
        }
    }
    let subjects: Vec<(Vec<Template>, Vec<Template>)> = sets.iter().map(|[a, b]| (a.clone(), b.clone())).collect();
    let pose_matrix = mean_pose_similarity(&subjects).stage(Stage::Evaluate)?;
    let (diagonal_mean, off_diagonal_mean) = diagonal_contrast(&pose_matrix);

    let pairs = bench.frontal_profile_pairs(cfg.eval.seed);
    let scored: Vec<(f64, bool)> = pairs
        .iter()
        .map(|&(a, b, same)| template_similarity(&single[a], &single[b]).map(|s| (s, same)))
        .collect::<Result<_, _>>()
        .stage(Stage::Evaluate)?;
    let plain = verification_accuracy(&scored, cfg.eval.folds).stage(Stage::Evaluate)?;
    progress("plain protocols done", started);

    let template = match generator {
        None => None,
        Some(g) => {
            let mut cache: Vec<Option<Template>> = vec![None; bench.images.len()];
            let mut needed: Vec<usize> = pairs.iter().flat_map(|&(a, b, _)| [a, b]).collect();
            needed.sort_unstable();
            needed.dedup();
            for (n, &k) in needed.iter().enumerate() {
                let b = &bench.images[k];
                let seed = derive_seed(cfg.eval.seed, 0x7E3A_0000 + k as u64);
                cache[k] = Some(synthesized_template(model, embedder, g, &b.image, &b.landmarks, &cfg.fit, cfg.data.uv_size, cfg.synth_yaw_step, seed)?);
                if (n + 1) % 20 == 0 {
                    progress(&format!("template {}/{}", n + 1, needed.len()), started);
                }
            }
            let scored: Vec<(f64, bool)> = pairs
                .iter()
                .map(|&(a, b, same)| template_similarity(cache[a].as_ref().unwrap(), cache[b].as_ref().unwrap()).map(|s| (s, same)))
                .collect::<Result<_, _>>()
                .stage(Stage::Evaluate)?;
            Some(verification_accuracy(&scored, cfg.eval.folds).stage(Stage::Evaluate)?)
        }
    };
    Ok(EvalOutcome {
        same_similarity: mean(&same),
        cross_similarity: mean(&cross),
        pose_matrix,
        diagonal_mean,
        off_diagonal_mean,
        plain,
        template,
    })
}

pub fn build_model(cfg: &PipelineConfig) -> Result<MorphableModel, PipelineError> {
    match &cfg.model.path {
        Some(p) => formats::read_model(p).stage(Stage::Model),
        None => make_synthetic_model(cfg.model.seed, cfg.model.vertices, cfg.model.shape_dim, cfg.model.texture_dim).stage(Stage::Model),
    }
}

pub fn config_digest(cfg: &PipelineConfig) -> String {
    Sha256::digest(cfg.render().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything a run leaves behind besides the report file.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub report: Report,
    pub report_path: PathBuf,
    pub outcome: TrainOutcome,
}

/// Runs every stage under `out` and writes `report.txt`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineRun, PipelineError> {
    let started = Instant::now();
    cfg.validate().stage(Stage::Model)?;
    let mut report = Report::new();
    report.set("config.sha256", config_digest(cfg));
    formats::write_text(&out.join("config.txt"), &cfg.render()).stage(Stage::Report)?;

    let model = build_model(cfg)?;
    formats::write_model(&out.join("model.uvm"), &model).stage(Stage::Model)?;
    report.set("model.vertices", model.vertex_count());
    report.set("model.triangles", model.triangles().len());
    report.set("model.shape_dim", model.shape_dim());
    report.set("model.texture_dim", model.texture_dim());

    let d = &cfg.data;
    let manifest = dataset::gen_dataset(&model, d.identities, d.views, d.seed, d.image_size, d.uv_size, &out.join("data")).stage(Stage::Data)?;
    report.set("data.samples", manifest.records.len());
    report.set("data.train_identities", manifest.identities(Split::Train).len());
    report.set("data.test_identities", manifest.identities(Split::Test).len());
    progress("dataset written", started);

    let train_set = process_split(&model, &manifest, Split::Train, &cfg.fit, d.uv_size, Some(out))?;
    let test_set = process_split(&model, &manifest, Split::Test, &cfg.fit, d.uv_size, Some(out))?;
    let all: Vec<&ProcessedSample> = train_set.iter().chain(&test_set).collect();
    let rmse: Vec<f64> = all.iter().map(|s| s.rmse).collect();
    let yaw_err: Vec<f64> = all.iter().map(|s| (s.params.camera.yaw.to_degrees() - s.yaw).abs()).collect();
    report.set_f64("fit.mean_landmark_rmse_px", mean(&rmse));
    report.set_f64("fit.mean_yaw_error_deg", mean(&yaw_err));
    report.set_f64("fit.converged_fraction", all.iter().filter(|s| s.converged).count() as f64 / all.len() as f64);
    report.set_f64("extract.mean_missing_fraction", mean(&all.iter().map(|s| mask_fraction(&s.mask)).collect::<Vec<_>>()));
    progress("fitting and extraction done", started);

    let (embedder, accuracy) = pretrain_identity_embedder(&model, &manifest, cfg)?;
    report.set("embed.classes", embedder.n_classes());
    report.set_f64("embed.train_accuracy", accuracy);
    report.set("embed.fingerprint", format!("{:016x}", embedder.store.fingerprint()));
    progress("embedder pretrained", started);

    let before = embedder.store.fingerprint();
    let (ck, outcome) = train_stage(&model, &train_set, embedder, cfg)?;
    let frozen = ck.embedder.as_ref().is_some_and(|e| e.store.fingerprint() == before);
    formats::write_checkpoint(&out.join("checkpoint.uvc"), &ck).stage(Stage::Train)?;
    formats::write_csv(&out.join("loss_curves.csv"), &LOSS_CURVE_HEADER, &loss_curve_rows(&outcome)).stage(Stage::Train)?;
    let curves_finite = outcome.curves.iter().all(|c| [c.gen, c.adv_global, c.adv_local, c.id, c.total, c.disc].iter().all(|v| v.is_finite()));
    report.set("train.steps", outcome.steps);
    report.set("train.epochs", outcome.curves.len());
    report.set("train.optimizer", cfg.train.optimizer.name());
    report.set_f64("train.final_gen", outcome.last.gen);
    report.set_f64("train.final_adv_global", outcome.last.adv_global);
    report.set_f64("train.final_adv_local", outcome.last.adv_local);
    report.set_f64("train.final_id", outcome.last.id);
    report.set_f64("train.final_total", outcome.last_total);
    report.set("train.finite", curves_finite && outcome.last_total.is_finite() && ck.gan.generator.store.all_finite());
    report.set("train.embedder_frozen", frozen);
    report.set_f64s("train.curve_gen", &outcome.curves.iter().map(|c| c.gen).collect::<Vec<_>>());
    report.set_f64s("train.curve_total", &outcome.curves.iter().map(|c| c.total).collect::<Vec<_>>());
    progress("training done", started);

    let generator = &ck.gan.generator;
    let mut held_out = CompletionSummary::default();
    for s in &test_set {
        let seed = derive_seed(cfg.seed, 0xC0_0000 + (s.identity * 1000 + s.view) as u64);
        let completed = held_out.push(generator, &s.observed, &s.mask, &s.target, seed)?;
        formats::write_ppm(&out.join("completed").join(format!("{}.ppm", s.stem())), &completed).stage(Stage::Complete)?;
    }
    held_out.write(&mut report, "complete.");
    // Ground-truth geometry at yaw 60, isolating completion from fitting.
    let mut at60 = CompletionSummary::default();
    for id in manifest.identities(Split::Test) {
        let (params, uv) = dataset::identity(&model, d.seed, id, d.image_size, d.uv_size).stage(Stage::Complete)?;
        let (p, image) = dataset::render_view(&model, &params, &uv, 60.0, d.image_size).stage(Stage::Complete)?;
        let (observed, mask) = extract_uv(&image, &model, &p, d.uv_size, d.uv_size).stage(Stage::Complete)?;
        at60.push(generator, &observed, &mask, &uv, derive_seed(cfg.seed, 0x60_0000 + id as u64))?;
    }
    at60.write(&mut report, "complete.yaw60.");
    progress("completion evaluated", started);

    let grid = yaw_grid(cfg.synth_yaw_step);
    let mut synth_count = 0;
    if let Some(s) = test_set.first() {
        let completed = complete(generator, &s.observed, &s.mask, derive_seed(cfg.seed, 0x5E_0000), true).stage(Stage::Complete)?;
        let views = synthesize_views(&model, &s.params, &completed, &ViewRequest::Yaws(grid.clone()), d.image_size, d.image_size).stage(Stage::Synthesize)?;
        for (img, yaw) in &views {
            formats::write_ppm(&out.join("synth").join(format!("{}_yaw{:+04}.ppm", s.stem(), yaw.round() as i64)), img).stage(Stage::Synthesize)?;
        }
        synth_count = views.len();
    }
    report.set("synth.views", synth_count);
    report.set("synth.grid_size", grid.len());

    let bench = Benchmark::build(&model, &cfg.eval, d.image_size, d.uv_size)?;
    report.set("eval.identities", bench.identities);
    report.set("eval.images", bench.images.len());
    let embedder = ck.embedder.as_ref().expect("checkpoint carries the embedder");
    let eval = evaluate(&model, embedder, Some(generator), &bench, cfg, started)?;
    eval.write(&mut report);
    formats::write_csv(&out.join("eval").join("verification.csv"), &["protocol", "fold", "accuracy"], &eval.verification_rows()).stage(Stage::Evaluate)?;
    formats::write_text(&out.join("eval").join("pose_matrix.txt"), &eval.pose_grid()).stage(Stage::Evaluate)?;
    progress("evaluation done", started);

    let report_path = out.join("report.txt");
    report.write(&report_path).stage(Stage::Report)?;
    Ok(PipelineRun { report, report_path, outcome })
}

/// Report keys every pipeline run emits.
pub const REPORT_KEYS: &[&str] = &[
    "config.sha256",
    "model.vertices",
    "data.samples",
    "data.train_identities",
    "data.test_identities",
    "fit.mean_landmark_rmse_px",
    "fit.mean_yaw_error_deg",
    "extract.mean_missing_fraction",
    "embed.classes",
    "embed.train_accuracy",
    "train.steps",
    "train.final_gen",
    "train.final_total",
    "train.finite",
    "train.embedder_frozen",
    "complete.psnr_completed",
    "complete.psnr_noise_filled",
    "complete.psnr_blended",
    "complete.ssim_completed",
    "complete.ssim_noise_filled",
    "complete.yaw60.psnr_completed",
    "complete.yaw60.psnr_noise_filled",
    "synth.views",
    "eval.identities",
    "eval.same_identity_similarity",
    "eval.cross_identity_similarity",
    "eval.pose_matrix",
    "eval.pose_matrix_diagonal_mean",
    "eval.pose_matrix_off_diagonal_mean",
    "eval.plain_accuracy",
    "eval.template2template_accuracy",
];
