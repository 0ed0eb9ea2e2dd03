//! Alignment probability and the bi-directional contrastive objectives.
//!
//! For a seed pair (e1, e2) the in-batch negative set of the anchor e1 is
//! every other batch entity from either KG. The alignment probability is a
//! softmax over the positive plus those negatives at temperature τ, and the
//! per-modality loss averages the negative log probability over both
//! directions: −(log p(e1→e2) + log p(e2→e1)) / 2, which is non-negative.
//! Hard-negative replay adds one extra out-of-batch negative per anchor and
//! applies only to the fused objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tensor_core::{Tape, Tensor};

use crate::error::{MmeaError, Result};
use crate::kg::Modality;

/// Probabilities below this are clamped (and counted) before the log.
pub const P_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature τ.
    pub temperature: f64,
    pub batch_size: usize,
    /// Add the late intra-modal term over attended embeddings.
    pub use_licl: bool,
    /// Add the late-fusion objective (off by default).
    pub use_l_xi: bool,
    /// Hard-negative replay for the fused objective.
    pub use_merp: bool,
    /// l2-normalize embeddings before every similarity.
    pub normalize_embeddings: bool,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            temperature: 0.1,
            batch_size: 3500,
            use_licl: true,
            use_l_xi: false,
            use_merp: false,
            normalize_embeddings: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(MmeaError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(MmeaError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Replay negatives for the fused objective: one out-of-batch embedding row
/// per anchor, with a flag marking rows that duplicate an in-batch entity
/// (those are masked out, keeping the negative set a plain union).
pub struct MerpNegatives {
    /// Fused embeddings of each KG1 anchor's replay negative (B × D).
    pub rows1: Tensor,
    pub dup1: Vec<bool>,
    /// Same for KG2 anchors.
    pub rows2: Tensor,
    pub dup2: Vec<bool>,
}

/// Batch embeddings, row-aligned with the seed pairs of the batch.
/// Tensors are raw; normalization happens inside the loss when configured.
pub struct BatchEmbeddings {
    /// (modality, side-1 rows, side-2 rows), each B × d.
    pub per_modality: Vec<(Modality, Tensor, Tensor)>,
    /// Attended rows ĥ, same layout.
    pub attended: Vec<(Modality, Tensor, Tensor)>,
    /// Fused h^μ, B × |M|·d per side.
    pub fused: (Tensor, Tensor),
    /// Late fusion h^ξ, only consulted when `use_l_xi`.
    pub fused_late: Option<(Tensor, Tensor)>,
    pub merp: Option<MerpNegatives>,
}

/// Loss value plus its components (componentwise values are plain numbers;
/// only `total` carries gradients).
pub struct LossBreakdown {
    pub total: Tensor,
    pub l_mu: f64,
    pub l_icl: f64,
    pub l_licl: f64,
    pub l_xi: Option<f64>,
    /// How many probabilities were clamped at [`P_EPSILON`].
    pub clamped: usize,
}

/// Alignment probability of one anchor/positive pair against an explicit
/// negative set (scalar path): exp-similarity of the positive over the sum
/// including the negatives.
pub fn alignment_probability(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(MmeaError::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let dot = |a: &[f64], b: &[f64]| -> Result<f64> {
        if a.len() != b.len() {
            return Err(MmeaError::Invalid(format!(
                "embedding lengths differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
    };
    // shift by the largest logit so the exponentials stay finite
    let pos_logit = dot(anchor, positive)? / temperature;
    let mut logits = vec![pos_logit];
    for n in negatives {
        logits.push(dot(anchor, n)? / temperature);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok((pos_logit - max).exp() / denom)
}

/// One direction of the in-batch contrastive objective: anchors `za`,
/// positives `zb` (row i of `zb` is the positive of row i of `za`), plus an
/// optional replay column. Returns the mean negative log probability and the
/// number of clamped probabilities.
pub fn direction_loss(
    tape: &Tape,
    za: &Tensor,
    zb: &Tensor,
    replay: Option<(&Tensor, &[bool])>,
    temperature: f64,
) -> Result<(Tensor, usize)> {
    let (b, d) = za.rows_cols();
    if zb.rows_cols() != (b, d) {
        return Err(MmeaError::Invalid(format!(
            "contrastive sides disagree: {:?} vs {:?}",
            za.shape(),
            zb.shape()
        )));
    }
    let inv_t = 1.0 / temperature;
    let s_same = tape.scale(&tape.matmul(za, &tape.transpose(za)?)?, inv_t)?;
    let s_cross = tape.scale(&tape.matmul(za, &tape.transpose(zb)?)?, inv_t)?;

    let mut parts = vec![&s_same, &s_cross];
    let replay_col;
    if let Some((rows, _)) = replay {
        if rows.rows_cols() != (b, d) {
            return Err(MmeaError::Invalid(format!(
                "replay rows {:?} do not match batch {:?}",
                rows.shape(),
                za.shape()
            )));
        }
        let sims = tape.sum_axis1(&tape.mul(za, rows)?)?;
        replay_col = tape.reshape(&tape.scale(&sims, inv_t)?, &[b, 1])?;
        parts.push(&replay_col);
    }
    let logits = tape.concat_cols(&parts)?;
    let width = logits.rows_cols().1;

    let mut mask = vec![true; b * width];
    for i in 0..b {
        mask[i * width + i] = false; // anchor against itself
        if let Some((_, dup)) = replay {
            if dup[i] {
                mask[i * width + 2 * b] = false;
            }
        }
    }
    let probs = tape.masked_softmax(&logits, &Arc::new(mask))?;

    let mut onehot = vec![0.0; b * width];
    for i in 0..b {
        onehot[i * width + b + i] = 1.0;
    }
    let onehot = Tensor::from_vec(&[b, width], onehot)?;
    let p_pos = tape.sum_axis1(&tape.mul(&probs, &onehot)?)?;
    let clamped = p_pos.data().iter().filter(|&&p| p < P_EPSILON).count();
    let log_p = tape.log(&tape.clamp_min(&p_pos, P_EPSILON)?)?;
    Ok((tape.scale(&tape.mean_all(&log_p)?, -1.0)?, clamped))
}

fn maybe_normalize(tape: &Tape, t: &Tensor, normalize: bool) -> Result<Tensor> {
    if normalize {
        Ok(tape.l2_normalize(t)?.0)
    } else {
        Ok(t.clone())
    }
}

/// Bi-directional loss for one embedding table pair.
pub fn modal_loss(
    tape: &Tape,
    cfg: &LossConfig,
    side1: &Tensor,
    side2: &Tensor,
    replay: Option<&MerpNegatives>,
) -> Result<(Tensor, usize)> {
    let z1 = maybe_normalize(tape, side1, cfg.normalize_embeddings)?;
    let z2 = maybe_normalize(tape, side2, cfg.normalize_embeddings)?;
    let (r1, r2);
    let (m1, m2) = match replay {
        Some(m) => {
            r1 = maybe_normalize(tape, &m.rows1, cfg.normalize_embeddings)?;
            r2 = maybe_normalize(tape, &m.rows2, cfg.normalize_embeddings)?;
            (
                Some((&r1, m.dup1.as_slice())),
                Some((&r2, m.dup2.as_slice())),
            )
        }
        None => (None, None),
    };
    let (fwd, c1) = direction_loss(tape, &z1, &z2, m1, cfg.temperature)?;
    let (bwd, c2) = direction_loss(tape, &z2, &z1, m2, cfg.temperature)?;
    Ok((tape.scale(&tape.add(&fwd, &bwd)?, 0.5)?, c1 + c2))
}

/// The full objective: fused loss (with replay when configured) plus the
/// intra-modal sum, the late intra-modal sum when enabled, and optionally
/// the late-fusion term.
pub fn total_loss(tape: &Tape, cfg: &LossConfig, batch: &BatchEmbeddings) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut clamped = 0;

    let replay = if cfg.use_merp { batch.merp.as_ref() } else { None };
    let (l_mu, c) = modal_loss(tape, cfg, &batch.fused.0, &batch.fused.1, replay)?;
    clamped += c;

    let mut l_icl: Option<Tensor> = None;
    for (_, h1, h2) in &batch.per_modality {
        let (lm, c) = modal_loss(tape, cfg, h1, h2, None)?;
        clamped += c;
        l_icl = Some(match l_icl {
            Some(acc) => tape.add(&acc, &lm)?,
            None => lm,
        });
    }
    let l_icl = l_icl.ok_or_else(|| MmeaError::Invalid("no modalities in batch".into()))?;

    let mut total = tape.add(&l_mu, &l_icl)?;

    let mut l_licl_value = 0.0;
    if cfg.use_licl {
        let mut l_licl: Option<Tensor> = None;
        for (_, h1, h2) in &batch.attended {
            let (lm, c) = modal_loss(tape, cfg, h1, h2, None)?;
            clamped += c;
            l_licl = Some(match l_licl {
                Some(acc) => tape.add(&acc, &lm)?,
                None => lm,
            });
        }
        if let Some(l) = l_licl {
            l_licl_value = l.item()?;
            total = tape.add(&total, &l)?;
        }
    }

    let mut l_xi_value = None;
    if cfg.use_l_xi {
        let (xi1, xi2) = batch.fused_late.as_ref().ok_or_else(|| {
            MmeaError::Invalid("late-fusion loss enabled but no h^xi provided".into())
        })?;
        let (l_xi, c) = modal_loss(tape, cfg, xi1, xi2, None)?;
        clamped += c;
        l_xi_value = Some(l_xi.item()?);
        total = tape.add(&total, &l_xi)?;
    }

    Ok(LossBreakdown {
        l_mu: l_mu.item()?,
        l_icl: l_icl.item()?,
        l_licl: l_licl_value,
        l_xi: l_xi_value,
        clamped,
        total,
    })
}
