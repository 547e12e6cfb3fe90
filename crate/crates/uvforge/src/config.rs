//! Flat `key = value` pipeline configuration with dotted section keys.

use std::path::{Path, PathBuf};

use thiserror::Error;
use uvforge_core::fit::FitWeights;
use uvforge_core::nn::{OptimizerKind, TrainConfig};

use crate::formats::parse_key_values;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Syntax(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("key `{key}`: path {path} does not exist")]
    MissingPath { key: String, path: String },
    #[error("invalid setting: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub vertices: usize,
    pub shape_dim: usize,
    pub texture_dim: usize,
    /// Existing archive to load instead of generating one.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub identities: usize,
    pub views: usize,
    pub image_size: usize,
    pub uv_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub weights: FitWeights,
    pub iterations: usize,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dim: usize,
    pub renders_per_class: usize,
    /// Extra identities used only to pretrain the embedder.
    pub pool_identities: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    /// Benchmark identities, disjoint from the completion dataset.
    pub identities: usize,
    pub images_per_pose: usize,
    pub folds: usize,
    /// Jitter around the nominal frontal / three-quarter / profile yaws.
    pub yaw_jitter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub embed: EmbedConfig,
    /// Degrees between views of the synthesis grid.
    pub synth_yaw_step: f64,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig { seed: 11, vertices: 2000, shape_dim: 20, texture_dim: 20, path: None },
            data: DataConfig { seed: 13, identities: 10, views: 20, image_size: 128, uv_size: 64 },
            fit: FitConfig { weights: FitWeights::default(), iterations: 20, tolerance: 1e-8 },
            train: TrainConfig { seed: 17, ..TrainConfig::default() },
            embed: EmbedConfig { steps: 400, batch_size: 32, learning_rate: 1e-3, dim: 32, renders_per_class: 30, pool_identities: 20 },
            synth_yaw_step: 15.0,
            eval: EvalConfig { seed: 19, identities: 20, images_per_pose: 2, folds: 10, yaw_jitter: 5.0 },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.to_string(), value: value.to_string() })
}

impl PipelineConfig {
    /// Smoke-sized run: 5 identities, 64x64 UVs, 200 generator steps.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.data.identities = 5;
        c.train.max_steps = Some(200);
        c.train.epochs = 1000;
        c
    }

    /// Applies `key = value` text on top of `self`. Relative paths resolve
    /// against `base`.
    pub fn apply_text(mut self, text: &str, base: &Path) -> Result<Self, ConfigError> {
        for (k, v) in parse_key_values(text).map_err(ConfigError::Syntax)? {
            self.set(&k, &v, base)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Syntax(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::default().apply_text(&text, base)
    }

    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), ConfigError> {
        let w = &mut self.fit.weights;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.seed" => self.model.seed = parse(key, v)?,
            "model.vertices" => self.model.vertices = parse(key, v)?,
            "model.shape_dim" => self.model.shape_dim = parse(key, v)?,
            "model.texture_dim" => self.model.texture_dim = parse(key, v)?,
            "model.path" => {
                let p = base.join(v);
                if !p.exists() {
                    return Err(ConfigError::MissingPath { key: key.to_string(), path: p.display().to_string() });
                }
                self.model.path = Some(p);
            }
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.identities" => self.data.identities = parse(key, v)?,
            "data.views" => self.data.views = parse(key, v)?,
            "data.image_size" => self.data.image_size = parse(key, v)?,
            "data.uv_size" => self.data.uv_size = parse(key, v)?,
            "fit.alpha_l" => w.alpha_l = parse(key, v)?,
            "fit.alpha_s" => w.alpha_s = parse(key, v)?,
            "fit.alpha_t" => w.alpha_t = parse(key, v)?,
            "fit.photometric" => w.photometric = parse(key, v)?,
            "fit.iterations" => self.fit.iterations = parse(key, v)?,
            "fit.tolerance" => self.fit.tolerance = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.lambda1" => t.lambda1 = parse(key, v)?,
            "train.lambda2" => t.lambda2 = parse(key, v)?,
            "train.lambda3" => t.lambda3 = parse(key, v)?,
            "train.crop_ratio" => t.crop_ratio = parse(key, v)?,
            "train.max_steps" => t.max_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "train.optimizer" => {
                t.optimizer = OptimizerKind::parse(v).ok_or(ConfigError::BadValue { key: key.to_string(), value: v.to_string() })?
            }
            "embed.steps" => self.embed.steps = parse(key, v)?,
            "embed.batch_size" => self.embed.batch_size = parse(key, v)?,
            "embed.learning_rate" => self.embed.learning_rate = parse(key, v)?,
            "embed.dim" => self.embed.dim = parse(key, v)?,
            "embed.renders_per_class" => self.embed.renders_per_class = parse(key, v)?,
            "embed.pool_identities" => self.embed.pool_identities = parse(key, v)?,
            "synth.yaw_step" => self.synth_yaw_step = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "eval.identities" => self.eval.identities = parse(key, v)?,
            "eval.images_per_pose" => self.eval.images_per_pose = parse(key, v)?,
            "eval.folds" => self.eval.folds = parse(key, v)?,
            "eval.yaw_jitter" => self.eval.yaw_jitter = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.fit.weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        let uv = self.data.uv_size;
        if uv < 16 || !uv.is_power_of_two() {
            return bad("data.uv_size must be a power of two >= 16");
        }
        if self.data.image_size < 32 || self.data.image_size % 32 != 0 {
            return bad("data.image_size must be a positive multiple of 32");
        }
        if self.data.identities < 2 || self.data.views == 0 {
            return bad("need at least 2 identities and 1 view");
        }
        if self.eval.identities < 2 || self.eval.images_per_pose == 0 || self.eval.folds < 2 {
            return bad("eval needs >= 2 identities, >= 1 image per pose and >= 2 folds");
        }
        if !(self.eval.yaw_jitter >= 0.0 && self.eval.yaw_jitter <= 7.5) {
            return bad("eval.yaw_jitter must lie in [0, 7.5]");
        }
        if !(self.synth_yaw_step > 0.0 && self.synth_yaw_step <= 180.0) {
            return bad("synth.yaw_step must lie in (0, 180]");
        }
        if self.embed.steps == 0 || self.embed.batch_size == 0 || self.embed.renders_per_class == 0 || self.embed.dim == 0 {
            return bad("embed settings must be positive");
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; `apply_text` of it round-trips.
    pub fn render(&self) -> String {
        let w = &self.fit.weights;
        let t = &self.train;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("model.seed = {}", self.model.seed),
            format!("model.vertices = {}", self.model.vertices),
            format!("model.shape_dim = {}", self.model.shape_dim),
            format!("model.texture_dim = {}", self.model.texture_dim),
        ];
        if let Some(p) = &self.model.path {
            lines.push(format!("model.path = {}", p.display()));
        }
        lines.extend([
            format!("data.seed = {}", self.data.seed),
            format!("data.identities = {}", self.data.identities),
            format!("data.views = {}", self.data.views),
            format!("data.image_size = {}", self.data.image_size),
            format!("data.uv_size = {}", self.data.uv_size),
            format!("fit.alpha_l = {:?}", w.alpha_l),
            format!("fit.alpha_s = {:?}", w.alpha_s),
            format!("fit.alpha_t = {:?}", w.alpha_t),
            format!("fit.photometric = {:?}", w.photometric),
            format!("fit.iterations = {}", self.fit.iterations),
            format!("fit.tolerance = {:?}", self.fit.tolerance),
            format!("train.seed = {}", t.seed),
            format!("train.epochs = {}", t.epochs),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.learning_rate = {:?}", t.learning_rate),
            format!("train.lambda1 = {:?}", t.lambda1),
            format!("train.lambda2 = {:?}", t.lambda2),
            format!("train.lambda3 = {:?}", t.lambda3),
            format!("train.crop_ratio = {:?}", t.crop_ratio),
            format!("train.max_steps = {}", t.max_steps.map_or("none".to_string(), |s| s.to_string())),
            format!("train.optimizer = {}", t.optimizer.name()),
            format!("embed.steps = {}", self.embed.steps),
            format!("embed.batch_size = {}", self.embed.batch_size),
            format!("embed.learning_rate = {:?}", self.embed.learning_rate),
            format!("embed.dim = {}", self.embed.dim),
            format!("embed.renders_per_class = {}", self.embed.renders_per_class),
            format!("embed.pool_identities = {}", self.embed.pool_identities),
            format!("synth.yaw_step = {:?}", self.synth_yaw_step),
            format!("eval.seed = {}", self.eval.seed),
            format!("eval.identities = {}", self.eval.identities),
            format!("eval.images_per_pose = {}", self.eval.images_per_pose),
            format!("eval.folds = {}", self.eval.folds),
            format!("eval.yaw_jitter = {:?}", self.eval.yaw_jitter),
        ]);
        lines.iter().map(|l| format!("{l}\n")).collect()
    }
}
