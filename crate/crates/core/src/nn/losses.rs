//! Reconstruction, adversarial, identity and combined losses.

use alloc::vec::Vec;

use super::nets::EmbedNet;
use super::tape::{Tape, Var};
use super::train::TrainConfig;
use super::NnError;

/// Probabilities are clamped to `[ADV_EPS, 1 - ADV_EPS]` before the log.
pub const ADV_EPS: f64 = 1e-7;

/// Mean absolute difference: per-texel channel average, averaged over
/// texels (and over the batch).
pub fn loss_gen(tape: &mut Tape, fake: Var, real: Var) -> Result<Var, NnError> {
    if tape.shape(fake) != tape.shape(real) {
        return Err(NnError::Shape(alloc::format!("loss_gen {:?} vs {:?}", tape.shape(fake), tape.shape(real))));
    }
    let d = tape.sub(fake, real)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

fn mean_log(tape: &mut Tape, p: Var) -> Result<Var, NnError> {
    let c = tape.clamp(p, ADV_EPS, 1.0 - ADV_EPS)?;
    let l = tape.log(c)?;
    tape.mean(l)
}

/// `mean log D(real) + mean log(1 - D(fake))`, which the discriminator
/// maximises.
pub fn discriminator_objective(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var, NnError> {
    let real_term = mean_log(tape, d_real)?;
    let inv = tape.affine(d_fake, -1.0, 1.0)?;
    let fake_term = mean_log(tape, inv)?;
    tape.add(real_term, fake_term)
}

/// Non-saturating generator surrogate `-mean log D(fake)`.
pub fn generator_surrogate(tape: &mut Tape, d_fake: Var) -> Result<Var, NnError> {
    let l = mean_log(tape, d_fake)?;
    tape.affine(l, -1.0, 0.0)
}

/// `(discriminator objective, generator surrogate)` on one tape.
pub fn loss_adv(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<(Var, Var), NnError> {
    Ok((discriminator_objective(tape, d_real, d_fake)?, generator_surrogate(tape, d_fake)?))
}

/// Centre loss `(1/m) sum ||e_i - c_{y_i}||^2` on embeddings `[m, d]`.
pub fn centre_loss(tape: &mut Tape, embeddings: Var, centers: &[Vec<f64>], labels: &[usize]) -> Result<Var, NnError> {
    let s = tape.shape(embeddings).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(NnError::Shape(alloc::format!("centre loss embeddings {s:?} for {} labels", labels.len())));
    }
    let mut c = Vec::with_capacity(s[0] * s[1]);
    for &l in labels {
        let center = centers.get(l).ok_or(NnError::UnknownLabel(l))?;
        if center.len() != s[1] {
            return Err(NnError::Shape(alloc::format!("centre of dimension {} for embeddings {s:?}", center.len())));
        }
        c.extend_from_slice(center);
    }
    let cv = tape.constant(c, &s)?;
    let d = tape.sub(embeddings, cv)?;
    let sq = tape.square(d)?;
    let total = tape.sum(sq)?;
    tape.affine(total, 1.0 / s[0] as f64, 0.0)
}

/// Identity loss of `[m, 3, 32, 32]` images through the frozen embedder.
pub fn loss_id(tape: &mut Tape, embedder: &EmbedNet, images: Var, labels: &[usize]) -> Result<Var, NnError> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= embedder.n_classes()) {
        return Err(NnError::UnknownLabel(bad));
    }
    let e = embedder.embed(tape, images, false)?;
    centre_loss(tape, e, &embedder.centers, labels)
}

/// Scalar loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub gen: f64,
    pub adv_global: f64,
    pub adv_local: f64,
    pub id: f64,
}

/// `L_gen + l1 L_adv_g + l2 L_adv_l + l3 L_id`.
pub fn loss_total(parts: &LossParts, config: &TrainConfig) -> f64 {
    parts.gen + config.lambda1 * parts.adv_global + config.lambda2 * parts.adv_local + config.lambda3 * parts.id
}

/// Graph version of [`loss_total`]; `id` may be absent.
pub fn loss_total_var(tape: &mut Tape, gen: Var, adv_global: Var, adv_local: Var, id: Option<Var>, config: &TrainConfig) -> Result<Var, NnError> {
    let g = tape.affine(adv_global, config.lambda1, 0.0)?;
    let l = tape.affine(adv_local, config.lambda2, 0.0)?;
    let mut total = tape.add(gen, g)?;
    total = tape.add(total, l)?;
    if let Some(id) = id {
        let i = tape.affine(id, config.lambda3, 0.0)?;
        total = tape.add(total, i)?;
    }
    Ok(total)
}
