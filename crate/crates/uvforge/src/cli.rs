//! `uvforge` subcommands. Exit codes: 0 success, 1 stage failure, 2 usage.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use uvforge_core::fit::Landmarks;
use uvforge_core::model::{instantiate_shape, make_synthetic_model};
use uvforge_core::nn::{complete, OptimizerKind};
use uvforge_core::recognition::{synthesize_views, yaw_grid, ViewRequest};
use uvforge_core::uv::{extract_uv, mask_fraction};

use crate::config::PipelineConfig;
use crate::dataset::{self, DatasetManifest, Split};
use crate::formats::{self, Report};
use crate::pipeline::{self, Benchmark};

#[derive(Debug, Parser)]
#[command(name = "uvforge", version, about = "Self-occlusion-aware UV completion on synthetic morphable faces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Seed from `--seed`, else `UVFORGE_SEED`.
#[derive(Debug, Args)]
pub struct SeedArg {
    #[arg(long, env = "UVFORGE_SEED")]
    pub seed: Option<u64>,
}

impl SeedArg {
    fn or(&self, default: u64) -> u64 {
        self.seed.unwrap_or(default)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic morphable model archive.
    Genmodel {
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 2000)]
        vertices: usize,
        #[arg(long, default_value_t = 20)]
        shape_dim: usize,
        #[arg(long, default_value_t = 20)]
        texture_dim: usize,
        /// Output archive.
        #[arg(long)]
        out: PathBuf,
        /// Also write the mean face as OBJ next to the archive.
        #[arg(long)]
        obj: bool,
    },
    /// Render a multi-view synthetic dataset with a manifest.
    Gendata {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 10)]
        identities: usize,
        #[arg(long, default_value_t = 20)]
        views: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, default_value_t = 64)]
        uv_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model to one image and its landmarks.
    Fit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        /// Output directory (params.txt, fit.obj).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an image into UV space with fitted parameters.
    ExtractUv {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 64)]
        uv_size: usize,
        /// Output directory (uv.ppm, mask.pgm).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the completion networks on a dataset's training split.
    Train {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Pipeline config supplying fit, embedder and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, value_enum)]
        optimizer: Option<Optim>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete an incomplete UV map with a trained generator.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        uv: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        /// Keep the raw generator output on visible texels.
        #[arg(long)]
        no_composite: bool,
        /// Output directory (completed.ppm).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a textured face at new yaws.
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        uv: PathBuf,
        /// Grid step in degrees (-90..=90).
        #[arg(long, conflicts_with = "count")]
        grid: Option<f64>,
        /// Number of seeded random yaws.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recognition protocols on a synthetic benchmark.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Checkpoint with embedder (and generator for template2template).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        identities: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage end to end and write a consolidated report.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the smoke-sized defaults.
        #[arg(long)]
        smoke: bool,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Optim {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Plain frontal-profile pair verification.
    FrontalProfile,
    /// Pair verification on templates of synthesized views.
    Template2template,
    /// 3x3 pose similarity matrix.
    PoseMatrix,
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => PipelineConfig::default(),
    })
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Genmodel { seed, vertices, shape_dim, texture_dim, out, obj } => {
            let model = make_synthetic_model(seed.or(0), vertices, shape_dim, texture_dim).context("model stage")?;
            formats::write_model(&out, &model)?;
            if obj {
                let v = instantiate_shape(&model, &vec![0.0; model.shape_dim()])?;
                formats::write_text(&out.with_extension("obj"), &formats::encode_obj(&v, model.uv_coords(), model.triangles()))?;
            }
            println!("wrote {} ({} vertices, {} triangles)", out.display(), model.vertex_count(), model.triangles().len());
        }
        Command::Gendata { model, seed, identities, views, image_size, uv_size, out } => {
            let m = formats::read_model(&model)?;
            let manifest = dataset::gen_dataset(&m, identities, views, seed.or(0), image_size, uv_size, &out).context("data stage")?;
            println!(
                "wrote {} ({} samples, {} train / {} test identities)",
                manifest.path().display(),
                manifest.records.len(),
                manifest.identities(Split::Train).len(),
                manifest.identities(Split::Test).len()
            );
        }
        Command::Fit { model, image, landmarks, iterations, out } => {
            let m = formats::read_model(&model)?;
            let img = formats::read_ppm(&image)?;
            let (indices, points) = formats::read_landmarks(&landmarks)?;
            let lm = Landmarks::new(points, indices).context("fit stage")?;
            let mut cfg = PipelineConfig::default().fit;
            cfg.iterations = iterations;
            let report = pipeline::fit_image(&m, &img, &lm, &cfg)?;
            let rmse = uvforge_core::fit::landmark_rmse(&m, &report.params, &lm)?;
            formats::write_params(&out.join("params.txt"), &report.params)?;
            let v = instantiate_shape(&m, &report.params.p)?;
            formats::write_text(&out.join("fit.obj"), &formats::encode_obj(&v, m.uv_coords(), m.triangles()))?;
            let mut r = Report::new();
            r.set_f64("yaw_deg", report.params.camera.yaw.to_degrees());
            r.set_f64("landmark_rmse_px", rmse);
            r.set("iterations", report.iterations);
            r.set("converged", report.converged);
            r.set_f64s("cost_history", &report.cost_history);
            r.write(&out.join("fit_report.txt"))?;
            print!("{}", r.render());
        }
        Command::ExtractUv { model, image, params, uv_size, out } => {
            let m = formats::read_model(&model)?;
            let img = formats::read_ppm(&image)?;
            let p = formats::read_params(&params)?;
            let (uv, mask) = extract_uv(&img, &m, &p, uv_size, uv_size).context("extract stage")?;
            formats::write_ppm(&out.join("uv.ppm"), &uv)?;
            formats::write_mask(&out.join("mask.pgm"), &mask)?;
            println!("missing_fraction: {:?}", mask_fraction(&mask));
        }
        Command::Train { model, data, config, seed, steps, epochs, batch_size, learning_rate, optimizer, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed.seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            if steps.is_some() {
                cfg.train.max_steps = steps;
            }
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
            cfg.train.learning_rate = learning_rate.unwrap_or(cfg.train.learning_rate);
            if let Some(o) = optimizer {
                cfg.train.optimizer = match o {
                    Optim::Sgd => OptimizerKind::Sgd,
                    Optim::Adam => OptimizerKind::Adam,
                };
            }
            cfg.validate()?;
            let m = formats::read_model(&model)?;
            let manifest = DatasetManifest::read(&data)?;
            let first = manifest.records.first().context("data stage: empty manifest")?;
            cfg.data.uv_size = manifest.load(first)?.uv.width();
            let train_set = pipeline::process_split(&m, &manifest, Split::Train, &cfg.fit, cfg.data.uv_size, Some(&out))?;
            let (embedder, acc) = pipeline::pretrain_identity_embedder(&m, &manifest, &cfg)?;
            let (ck, outcome) = pipeline::train_stage(&m, &train_set, embedder, &cfg)?;
            formats::write_checkpoint(&out.join("checkpoint.uvc"), &ck)?;
            formats::write_csv(&out.join("loss_curves.csv"), &pipeline::LOSS_CURVE_HEADER, &pipeline::loss_curve_rows(&outcome))?;
            let mut r = Report::new();
            r.set("steps", outcome.steps);
            r.set_f64("embed_train_accuracy", acc);
            r.set_f64("final_gen", outcome.last.gen);
            r.set_f64("final_total", outcome.last_total);
            r.write(&out.join("train_report.txt"))?;
            print!("{}", r.render());
        }
        Command::Complete { checkpoint, uv, mask, seed, no_composite, out } => {
            let ck = formats::read_checkpoint(&checkpoint)?;
            let uv = formats::read_ppm(&uv)?;
            let mask = formats::read_mask(&mask)?;
            let done = complete(&ck.gan.generator, &uv, &mask, seed.or(0), !no_composite).context("complete stage")?;
            formats::write_ppm(&out.join("completed.ppm"), &done)?;
            println!("wrote {}", out.join("completed.ppm").display());
        }
        Command::Synthesize { model, params, uv, grid, count, seed, size, out } => {
            let m = formats::read_model(&model)?;
            let p = formats::read_params(&params)?;
            let uv = formats::read_ppm(&uv)?;
            let request = match (grid, count) {
                (_, Some(n)) => ViewRequest::Random { count: n, seed: seed.or(0) },
                (Some(step), None) if step > 0.0 => ViewRequest::Yaws(yaw_grid(step)),
                (Some(_), None) => bail!("synthesize stage: --grid must be positive"),
                (None, None) => ViewRequest::augmentation(seed.or(0)),
            };
            let views = synthesize_views(&m, &p, &uv, &request, size, size).context("synthesize stage")?;
            let mut rows = Vec::new();
            for (k, (img, yaw)) in views.iter().enumerate() {
                let name = format!("view{k:02}.ppm");
                formats::write_ppm(&out.join(&name), img)?;
                rows.push(vec![name, format!("{yaw:?}")]);
            }
            formats::write_csv(&out.join("views.csv"), &["image", "yaw"], &rows)?;
            println!("wrote {} views to {}", views.len(), out.display());
        }
        Command::Eval { model, checkpoint, protocol, config, identities, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed.seed {
                cfg.eval.seed = s;
            }
            cfg.eval.identities = identities.unwrap_or(cfg.eval.identities);
            cfg.validate()?;
            let m = formats::read_model(&model)?;
            let ck = formats::read_checkpoint(&checkpoint)?;
            cfg.data.uv_size = ck.side;
            let embedder = ck.embedder.as_ref().context("evaluate stage: checkpoint has no embedder")?;
            let bench = Benchmark::build(&m, &cfg.eval, cfg.data.image_size, cfg.data.uv_size)?;
            let generator = (protocol == Protocol::Template2template).then_some(&ck.gan.generator);
            let outcome = pipeline::evaluate(&m, embedder, generator, &bench, &cfg, Instant::now())?;
            match protocol {
                Protocol::PoseMatrix => {
                    let grid = outcome.pose_grid();
                    formats::write_text(&out.join("pose_matrix.txt"), &grid)?;
                    print!("{grid}");
                }
                _ => {
                    let rows: Vec<Vec<String>> = outcome.verification_rows();
                    formats::write_csv(&out.join("verification.csv"), &["protocol", "fold", "accuracy"], &rows)?;
                    println!("protocol,fold,accuracy");
                    for r in rows {
                        println!("{}", r.join(","));
                    }
                }
            }
        }
        Command::Pipeline { config, smoke, seed, out } => {
            let mut cfg = match (&config, smoke) {
                (Some(p), true) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("config {}", p.display()))?;
                    PipelineConfig::smoke().apply_text(&text, p.parent().unwrap_or(Path::new(".")))?
                }
                (Some(p), false) => load_config(Some(p))?,
                (None, true) => PipelineConfig::smoke(),
                (None, false) => PipelineConfig::default(),
            };
            if let Some(s) = seed.seed {
                cfg.seed = s;
            }
            let run = pipeline::run_pipeline(&cfg, &out)?;
            print!("{}", run.report.render());
        }
    }
    Ok(())
}
