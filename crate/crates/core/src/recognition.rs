//! Pose re-rendering for augmentation, template descriptors and the
//! verification protocols.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::image::{Image, UvMap};
use crate::model::{FitParams, ModelError, MorphableModel};
use crate::nn::{EmbedNet, NnError};
use crate::raster::render;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecognitionError {
    #[error("no views requested")]
    EmptyRequest,
    #[error("yaw {0} degrees is outside [-90, 90]")]
    YawOutOfRange(f64),
    #[error("template descriptor has zero norm")]
    ZeroNorm,
    #[error("template has no images")]
    EmptyTemplate,
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("expected 3 templates per set, got {0} and {1}")]
    WrongSetSize(usize, usize),
    #[error("{pairs} pairs cannot fill {folds} folds")]
    TooFewPairs { pairs: usize, folds: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which yaws to render, in degrees.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewRequest {
    /// `count` seeded uniform yaws in `[-90, 90]`.
    Random { count: usize, seed: u64 },
    /// Explicit yaw list.
    Yaws(Vec<f64>),
}

impl ViewRequest {
    /// The 20-view augmentation default.
    pub fn augmentation(seed: u64) -> Self {
        Self::Random { count: 20, seed }
    }

    pub fn yaws(&self) -> Result<Vec<f64>, RecognitionError> {
        let yaws = match self {
            Self::Random { count, seed } => {
                let mut r = rng::seeded(*seed);
                (0..*count).map(|_| rng::uniform(&mut r, -90.0, 90.0)).collect()
            }
            Self::Yaws(list) => list.clone(),
        };
        if yaws.is_empty() {
            return Err(RecognitionError::EmptyRequest);
        }
        if let Some(&bad) = yaws.iter().find(|y| !(-90.0..=90.0).contains(*y)) {
            return Err(RecognitionError::YawOutOfRange(bad));
        }
        Ok(yaws)
    }
}

/// `-90, -90 + step, ..., 90` (13 entries for 15 degrees).
pub fn yaw_grid(step: f64) -> Vec<f64> {
    assert!(step > 0.0);
    let n = libm::floor(180.0 / step + 1e-9) as usize;
    (0..=n).map(|i| -90.0 + step * i as f64).collect()
}

/// Renders the textured face at each requested yaw, keeping shape and
/// translation. Returns `(image, yaw degrees)` pairs.
pub fn synthesize_views(
    model: &MorphableModel,
    params: &FitParams,
    uv: &UvMap,
    request: &ViewRequest,
    width: usize,
    height: usize,
) -> Result<Vec<(Image, f64)>, RecognitionError> {
    let yaws = request.yaws()?;
    let mut out = Vec::with_capacity(yaws.len());
    for yaw in yaws {
        let p = FitParams { camera: params.camera.with_yaw(yaw.to_radians()), ..params.clone() };
        out.push((render(model, &p, uv, width, height)?.image, yaw));
    }
    Ok(out)
}

fn normalized(v: &[f64]) -> Result<Vec<f64>, RecognitionError> {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(RecognitionError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// A set of face images summarised by the unit-length mean embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub images: Vec<Image>,
    descriptor: Vec<f64>,
}

impl Template {
    pub fn new(embedder: &EmbedNet, images: Vec<Image>) -> Result<Self, RecognitionError> {
        if images.is_empty() {
            return Err(RecognitionError::EmptyTemplate);
        }
        let emb = embedder.embed_images(&images)?;
        let mut mean = vec![0.0; embedder.dim()];
        for e in &emb {
            mean.iter_mut().zip(e).for_each(|(m, v)| *m += v);
        }
        let descriptor = normalized(&mean)?;
        Ok(Self { images, descriptor })
    }

    /// Template from a raw descriptor, which is normalised.
    pub fn from_descriptor(descriptor: &[f64]) -> Result<Self, RecognitionError> {
        Ok(Self { images: Vec::new(), descriptor: normalized(descriptor)? })
    }

    pub fn descriptor(&self) -> &[f64] {
        &self.descriptor
    }
}

/// Cosine similarity of two templates.
pub fn template_similarity(a: &Template, b: &Template) -> Result<f64, RecognitionError> {
    if a.descriptor.len() != b.descriptor.len() {
        return Err(RecognitionError::DimensionMismatch(a.descriptor.len(), b.descriptor.len()));
    }
    Ok(a.descriptor.iter().zip(&b.descriptor).map(|(x, y)| x * y).sum())
}

/// Entry `(i, j)` is the similarity of `a[i]` and `b[j]`; sets are ordered
/// (frontal, three-quarter, profile).
pub fn pose_similarity_matrix(a: &[Template], b: &[Template]) -> Result<[[f64; 3]; 3], RecognitionError> {
    if a.len() != 3 || b.len() != 3 {
        return Err(RecognitionError::WrongSetSize(a.len(), b.len()));
    }
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = template_similarity(&a[i], &b[j])?;
        }
    }
    Ok(m)
}

/// Average of per-subject 3x3 matrices.
pub fn mean_pose_similarity(subjects: &[(Vec<Template>, Vec<Template>)]) -> Result<[[f64; 3]; 3], RecognitionError> {
    if subjects.is_empty() {
        return Err(RecognitionError::EmptyRequest);
    }
    let mut acc = [[0.0; 3]; 3];
    for (a, b) in subjects {
        let m = pose_similarity_matrix(a, b)?;
        for i in 0..3 {
            for j in 0..3 {
                acc[i][j] += m[i][j];
            }
        }
    }
    let n = subjects.len() as f64;
    Ok(acc.map(|row| row.map(|v| v / n)))
}

/// Mean of the diagonal and of the off-diagonal entries.
pub fn diagonal_contrast(m: &[[f64; 3]; 3]) -> (f64, f64) {
    let diag = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let total: f64 = m.iter().flatten().sum();
    (diag, (total - 3.0 * diag) / 6.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub fold_accuracy: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Accuracy-maximising threshold (predict "same" when `score >= t`) over
/// candidate midpoints of the sorted scores. Ties keep the smallest.
pub fn best_threshold(pairs: &[(f64, bool)]) -> f64 {
    let mut scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    scores.sort_by(|a, b| a.total_cmp(b));
    scores.dedup();
    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(scores.first().map_or(0.0, |s| s - 1.0));
    for w in scores.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(scores.last().map_or(0.0, |s| s + 1.0));
    let mut best = (usize::MAX, candidates[0]);
    let mut best_correct = 0usize;
    for (k, &t) in candidates.iter().enumerate() {
        let correct = pairs.iter().filter(|(s, same)| (*s >= t) == *same).count();
        if best.0 == usize::MAX || correct > best_correct {
            best = (k, t);
            best_correct = correct;
        }
    }
    best.1
}

fn accuracy_at(pairs: &[(f64, bool)], t: f64) -> f64 {
    pairs.iter().filter(|(s, same)| (*s >= t) == *same).count() as f64 / pairs.len() as f64
}

/// Contiguous fold `k` of `n` items split into `folds` near-equal parts.
fn fold_range(n: usize, folds: usize, k: usize) -> core::ops::Range<usize> {
    (k * n / folds)..((k + 1) * n / folds)
}

/// `folds`-fold verification: each fold is scored at the threshold chosen on
/// the remaining folds only. Pairs are `(similarity, same identity)`.
pub fn verification_accuracy(pairs: &[(f64, bool)], folds: usize) -> Result<VerificationReport, RecognitionError> {
    if folds < 2 || pairs.len() < folds {
        return Err(RecognitionError::TooFewPairs { pairs: pairs.len(), folds });
    }
    let mut fold_accuracy = Vec::with_capacity(folds);
    let mut thresholds = Vec::with_capacity(folds);
    for k in 0..folds {
        let held = fold_range(pairs.len(), folds, k);
        let train: Vec<(f64, bool)> = pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| !held.contains(i))
            .map(|(_, p)| *p)
            .collect();
        let t = best_threshold(&train);
        thresholds.push(t);
        fold_accuracy.push(accuracy_at(&pairs[held], t));
    }
    let mean = fold_accuracy.iter().sum::<f64>() / folds as f64;
    let var = fold_accuracy.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / folds as f64;
    Ok(VerificationReport { fold_accuracy, thresholds, mean, std: libm::sqrt(var) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_requests() {
        let g = yaw_grid(15.0);
        assert_eq!(g.len(), 13);
        assert_eq!(g[0], -90.0);
        assert_eq!(g[12], 90.0);
        let a = ViewRequest::augmentation(4).yaws().unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, ViewRequest::augmentation(4).yaws().unwrap());
        assert!(a.iter().all(|y| (-90.0..=90.0).contains(y)));
        assert_eq!(ViewRequest::Yaws(vec![]).yaws(), Err(RecognitionError::EmptyRequest));
        assert_eq!(ViewRequest::Yaws(vec![95.0]).yaws(), Err(RecognitionError::YawOutOfRange(95.0)));
    }

    #[test]
    fn similarity_examples() {
        let a = Template::from_descriptor(&[3.0, 4.0]).unwrap();
        let b = Template::from_descriptor(&[-4.0, 3.0]).unwrap();
        assert_eq!(template_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(template_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(Template::from_descriptor(&[0.0, 0.0]), Err(RecognitionError::ZeroNorm));
        let scaled = Template::from_descriptor(&[30.0, 40.0]).unwrap();
        assert_eq!(template_similarity(&scaled, &b).unwrap(), template_similarity(&b, &a).unwrap());
        let set = vec![a.clone(), a.clone(), a];
        assert_eq!(pose_similarity_matrix(&set, &set).unwrap(), [[1.0; 3]; 3]);
        assert!(pose_similarity_matrix(&set[..2], &set).is_err());
    }

    #[test]
    fn separable_scores_verify_perfectly() {
        let pairs: Vec<(f64, bool)> = (0..100).map(|i| if i % 2 == 0 { (0.9, true) } else { (0.1, false) }).collect();
        let r = verification_accuracy(&pairs, 10).unwrap();
        assert!(r.fold_accuracy.iter().all(|&a| a == 1.0));
        assert_eq!(r.std, 0.0);
        assert!(verification_accuracy(&pairs[..5], 10).is_err());
    }

    #[test]
    fn threshold_ignores_held_out_labels() {
        let mut r = rng::seeded(3);
        let mut pairs: Vec<(f64, bool)> = (0..200).map(|i| (rng::unit(&mut r) + if i % 2 == 0 { 0.3 } else { 0.0 }, i % 2 == 0)).collect();
        let before = verification_accuracy(&pairs, 10).unwrap();
        // Shuffle labels inside fold 0 only.
        let mut labels: Vec<bool> = pairs[0..20].iter().map(|p| p.1).collect();
        rng::shuffle(&mut r, &mut labels);
        for (p, l) in pairs[0..20].iter_mut().zip(labels) {
            p.1 = l;
        }
        let after = verification_accuracy(&pairs, 10).unwrap();
        assert_eq!(before.thresholds[0], after.thresholds[0]);
    }
}
