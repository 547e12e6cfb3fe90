//! Toy UV completion networks on a small reverse-mode autodiff core.

pub mod layers;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
pub mod tape;
pub mod train;

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::uv::UvError;

pub use losses::{centre_loss, discriminator_objective, generator_surrogate, loss_adv, loss_gen, loss_id, loss_total, LossParts, ADV_EPS};
pub use nets::{image_to_planar, planar_to_image, DiscriminatorNet, EmbedNet, GeneratorNet};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, SparseMap, Tape, Var};
pub use train::{complete, pretrain_embedder, train, EmbedderConfig, LossRecord, TrainConfig, TrainOutcome, TrainSample, UvGan};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("unknown class label {0}")]
    UnknownLabel(usize),
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("embedder reached only {0:.3} train accuracy")]
    NotConverged(f64),
    #[error("embedder must be frozen before completion training")]
    EmbedderNotFrozen,
    #[error("training diverged at epoch {epoch} (step {step})")]
    Diverged { epoch: usize, step: usize },
    #[error("training configuration values must be positive")]
    InvalidConfig,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Uv(#[from] UvError),
}
