//! Meta modality hybrid: cross-modal attention over one entity's modality
//! embeddings, an optional feed-forward refinement, per-entity meta modality
//! weights, and early/late fusion.
//!
//! Attention runs across an entity's |M| modality vectors, not across
//! entities. All projections are shared across modalities and across both
//! KGs. The meta weight of a modality is the softmax of the attention mass
//! it *receives* from all query modalities, summed over heads and scaled by
//! 1/sqrt(|M|·N_h); a row sum would be constant one per query and carry no
//! signal.

use tensor_core::rng::Prng;
use tensor_core::{Tape, Tensor};

use crate::error::{MmeaError, Result};

/// How far a softmax row may drift from summing to one before
/// [`meta_weights`] rejects its input.
const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone)]
pub struct MhcaHeadParams {
    pub w_q: Tensor, // d × d_h
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Multi-head cross-modal attention parameters; `d_h = d / N_h`.
#[derive(Clone)]
pub struct MhcaParams {
    pub heads: Vec<MhcaHeadParams>,
    pub w_o: Tensor, // d × d
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

fn glorot(rng: &mut Prng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("glorot init")
}

impl MhcaParams {
    pub fn init(d: usize, n_heads: usize, rng: &mut Prng) -> Result<MhcaParams> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(MmeaError::Config(format!(
                "hidden dim {d} not divisible by {n_heads} attention heads"
            )));
        }
        let d_h = d / n_heads;
        Ok(MhcaParams {
            heads: (0..n_heads)
                .map(|_| MhcaHeadParams {
                    w_q: glorot(rng, d, d_h),
                    w_k: glorot(rng, d, d_h),
                    w_v: glorot(rng, d, d_h),
                })
                .collect(),
            w_o: glorot(rng, d, d),
            ln_gain: Tensor::ones(&[d]),
            ln_bias: Tensor::zeros(&[d]),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].w_q.shape()[1]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, head) in self.heads.iter().enumerate() {
            out.push((format!("mhca.h{i}.wq"), &head.w_q));
            out.push((format!("mhca.h{i}.wk"), &head.w_k));
            out.push((format!("mhca.h{i}.wv"), &head.w_v));
        }
        out.push(("mhca.wo".to_string(), &self.w_o));
        out.push(("mhca.ln.gain".to_string(), &self.ln_gain));
        out.push(("mhca.ln.bias".to_string(), &self.ln_bias));
        out
    }
}

/// Optional two-layer feed-forward refinement of the attended embeddings.
#[derive(Clone)]
pub struct FfnParams {
    pub enabled: bool,
    pub w1: Tensor, // d × d_in
    pub b1: Tensor, // [d_in]
    pub w2: Tensor, // d_in × d
    pub b2: Tensor, // [d]
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl FfnParams {
    pub fn init(d: usize, d_in: usize, enabled: bool, rng: &mut Prng) -> FfnParams {
        FfnParams {
            enabled,
            w1: glorot(rng, d, d_in),
            b1: Tensor::zeros(&[d_in]),
            w2: glorot(rng, d_in, d),
            b2: Tensor::zeros(&[d]),
            ln_gain: Tensor::ones(&[d]),
            ln_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("ffn.w1".to_string(), &self.w1),
            ("ffn.b1".to_string(), &self.b1),
            ("ffn.w2".to_string(), &self.w2),
            ("ffn.b2".to_string(), &self.b2),
            ("ffn.ln.gain".to_string(), &self.ln_gain),
            ("ffn.ln.bias".to_string(), &self.ln_bias),
        ]
    }
}

/// Everything the hybrid block derives for one entity.
pub struct MmhOutput {
    /// ĥ, one row per modality in canonical order (post-FFN when enabled).
    pub attended: Tensor,
    /// Attention per head: |M| × |M| rows summing to one.
    pub beta: Vec<Tensor>,
    /// Meta modality weights, a distribution over |M|.
    pub weights: Tensor,
    /// Early fusion h^μ: concat of w_m · h^m, shape (1, |M|·d).
    pub fused_early: Tensor,
    /// Late fusion h^ξ over the attended rows.
    pub fused_late: Tensor,
}

/// Cross-modal attention over one entity's stacked modality rows (|M| × d).
/// Returns layer-normed attended rows plus the per-head attention matrices.
pub fn mhca_forward(
    tape: &Tape,
    params: &MhcaParams,
    h: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (m, d) = h.rows_cols();
    if m == 0 || !h.is_matrix() {
        return Err(MmeaError::Invalid("mhca needs a |M| × d matrix".into()));
    }
    if d != params.w_o.shape()[0] {
        return Err(MmeaError::Invalid(format!(
            "modality vectors of length {d} but projections expect {}",
            params.w_o.shape()[0]
        )));
    }
    let scale = 1.0 / (params.head_dim() as f64).sqrt();
    let mut head_outs = Vec::with_capacity(params.heads.len());
    let mut betas = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = tape.matmul(h, &head.w_q)?;
        let k = tape.matmul(h, &head.w_k)?;
        let v = tape.matmul(h, &head.w_v)?;
        let scores = tape.scale(&tape.matmul(&q, &tape.transpose(&k)?)?, scale)?;
        let beta = tape.softmax(&scores)?;
        head_outs.push(tape.matmul(&beta, &v)?);
        betas.push(beta);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let concat = tape.concat_cols(&refs)?;
    let projected = tape.matmul(&concat, &params.w_o)?;
    let residual = tape.add(&projected, h)?;
    let attended = tape.layer_norm(&residual, &params.ln_gain, &params.ln_bias)?;
    Ok((attended, betas))
}

/// ĥ ← LayerNorm(FFN(ĥ) + ĥ) with FFN = ReLU(ĥ·W1 + b1)·W2 + b2.
pub fn ffn_forward(tape: &Tape, params: &FfnParams, attended: &Tensor) -> Result<Tensor> {
    if !params.enabled {
        return Err(MmeaError::Invalid("ffn_forward called while disabled".into()));
    }
    let inner = tape.relu(&tape.add(&tape.matmul(attended, &params.w1)?, &params.b1)?)?;
    let out = tape.add(&tape.matmul(&inner, &params.w2)?, &params.b2)?;
    let residual = tape.add(&out, attended)?;
    Ok(tape.layer_norm(&residual, &params.ln_gain, &params.ln_bias)?)
}

/// Meta modality weights from the attention stack: softmax over modalities of
/// the scaled attention mass each modality receives (column sums of β).
pub fn meta_weights(tape: &Tape, beta: &[Tensor]) -> Result<Tensor> {
    if beta.is_empty() {
        return Err(MmeaError::Invalid("meta_weights needs at least one head".into()));
    }
    let (m, m2) = beta[0].rows_cols();
    if m != m2 {
        return Err(MmeaError::Invalid(format!(
            "attention matrices must be square, got {m}×{m2}"
        )));
    }
    for b in beta {
        if b.rows_cols() != (m, m2) {
            return Err(MmeaError::Invalid("attention heads disagree on |M|".into()));
        }
        for i in 0..m {
            let sum: f64 = b.row_slice(i).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MmeaError::Invalid(format!(
                    "attention row {i} sums to {sum}, not 1"
                )));
            }
        }
    }
    let mut received = tape.sum_axis0(&beta[0])?;
    for b in &beta[1..] {
        received = tape.add(&received, &tape.sum_axis0(b)?)?;
    }
    let scaled = tape.scale(&received, 1.0 / ((m * beta.len()) as f64).sqrt())?;
    Ok(tape.softmax(&scaled)?)
}

/// Early and late fusion: concatenation over modalities of the weighted
/// pre-attention rows (h^μ) and attended rows (h^ξ); both come out 1 × |M|·d.
pub fn fuse(
    tape: &Tape,
    weights: &Tensor,
    h: &Tensor,
    attended: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (m, d) = h.rows_cols();
    if weights.numel() != m || attended.rows_cols() != (m, d) {
        return Err(MmeaError::Invalid(format!(
            "fusion inputs disagree: {} weights, h is {m}×{d}, attended is {:?}",
            weights.numel(),
            attended.shape()
        )));
    }
    let mut early = Vec::with_capacity(m);
    let mut late = Vec::with_capacity(m);
    for k in 0..m {
        let w = tape.slice_cols(weights, k, 1)?;
        early.push(tape.mul(&tape.row(h, k)?, &w)?);
        late.push(tape.mul(&tape.row(attended, k)?, &w)?);
    }
    let early_refs: Vec<&Tensor> = early.iter().collect();
    let late_refs: Vec<&Tensor> = late.iter().collect();
    Ok((
        tape.concat_cols(&early_refs)?,
        tape.concat_cols(&late_refs)?,
    ))
}

/// The full block for one entity: attention, optional FFN, meta weights,
/// and both fusions.
pub fn mmh_entity(
    tape: &Tape,
    mhca: &MhcaParams,
    ffn: Option<&FfnParams>,
    h: &Tensor,
) -> Result<MmhOutput> {
    let (attended, beta) = mhca_forward(tape, mhca, h)?;
    let attended = match ffn {
        Some(f) if f.enabled => ffn_forward(tape, f, &attended)?,
        _ => attended,
    };
    let weights = meta_weights(tape, &beta)?;
    let (fused_early, fused_late) = fuse(tape, &weights, h, &attended)?;
    Ok(MmhOutput {
        attended,
        beta,
        weights,
        fused_early,
        fused_late,
    })
}
