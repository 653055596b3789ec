//! Training objectives: the noise-supervised contrastive loss over perturbed
//! embeddings, Noisy-ArcMix over raw embeddings, and their unweighted sum.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArcFaceHead;

/// Unit-norm tolerance for contrastive inputs.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupconReduction {
    /// Sum over anchors.
    Sum,
    /// Sum over anchors divided by the batch size.
    BatchMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub reduction: SupconReduction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.02,
            reduction: SupconReduction::BatchMean,
        }
    }
}

/// Row-major `B × B` positive mask: `1` where `y_a[i] == y_a[j]` and `i != j`.
///
/// Positives are always chosen by the original labels, even when the mixing
/// coefficient makes the shuffled label the better description of a sample.
pub fn positive_mask(y_a: &[u32]) -> Vec<f64> {
    let b = y_a.len();
    let mut mask = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if i != j && y_a[i] == y_a[j] {
                mask[i * b + j] = 1.0;
            }
        }
    }
    mask
}

/// Noise-supervised contrastive loss over unit-norm rows `z`.
///
/// For each anchor `i`, the log-ratio of `exp(z_i·z_p/τ)` to the sum over all
/// other samples is averaged over its positives `p`; anchors with no positive
/// contribute zero. The per-anchor maximum over `A(i)` is subtracted before
/// exponentiating.
pub fn supcon_noise_loss(z: &Tensor, y_a: &[u32], cfg: &ContrastiveConfig) -> Result<Tensor> {
    let (b, _) = z.dims2()?;
    if b < 2 {
        return Err(Error::invalid(format!("contrastive loss needs at least 2 samples, got {b}")));
    }
    if y_a.len() != b {
        return Err(Error::invalid(format!("{} labels for {b} embeddings", y_a.len())));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let norms = z.sqr()?.sum(1)?.sqrt()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if let Some((row, n)) = norms.iter().enumerate().find(|(_, n)| !((*n - 1.0).abs() <= UNIT_NORM_TOL)) {
        return Err(Error::invalid(format!("contrastive input row {row} has norm {n}, expected 1")));
    }

    let dev = z.device();
    let dtype = z.dtype();
    let pos = positive_mask(y_a);
    let counts: Vec<f64> = pos.chunks(b).map(|r| r.iter().sum()).collect();
    // positive weights 1/|P(i)|; rows with empty P(i) stay all-zero
    let weights: Vec<f64> = pos
        .iter()
        .enumerate()
        .map(|(k, &p)| if p > 0.0 { p / counts[k / b] } else { 0.0 })
        .collect();
    // additive mask that removes the anchor itself from the max and the denominator
    let self_mask: Vec<f64> = (0..b * b).map(|k| if k / b == k % b { -1e30 } else { 0.0 }).collect();
    let weights = Tensor::from_vec(weights, (b, b), dev)?.to_dtype(dtype)?;
    let self_mask = Tensor::from_vec(self_mask, (b, b), dev)?.to_dtype(dtype)?;

    let sim = z.matmul(&z.t()?)?.affine(1.0 / cfg.temperature, 0.0)?;
    // max over A(i) rather than the whole row, so the self term (always the
    // largest) cannot push every other exponent into f32 subnormals
    let row_max = (&sim + &self_mask)?.max_keepdim(D::Minus1)?.detach();
    let shifted = sim.broadcast_sub(&row_max)?;
    let denom = (&shifted + &self_mask)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_prob = shifted.broadcast_sub(&denom)?;
    let per_anchor = (log_prob * weights)?.sum(D::Minus1)?;
    let total = per_anchor.sum_all()?.neg()?;
    Ok(match cfg.reduction {
        SupconReduction::Sum => total,
        SupconReduction::BatchMean => total.affine(1.0 / b as f64, 0.0)?,
    })
}

/// Mean negative log-softmax at `targets`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if targets.len() != b {
        return Err(Error::invalid(format!("{} targets for {b} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let lsm = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(targets.to_vec(), (b, 1), logits.device())?;
    Ok(lsm.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Noisy-ArcMix: `λ·CE(ArcFace(x, y_a), y_a) + (1−λ)·CE(ArcFace(x, y_a), y_b)`.
/// The angular margin sits at `y_a` in both terms.
pub fn noisy_arcmix_loss(emb: &Tensor, y_a: &[u32], y_b: &[u32], lambda: f64, head: &ArcFaceHead) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let logits = head.logits(emb, Some(y_a))?;
    let ce_a = cross_entropy(&logits, y_a)?;
    let ce_b = cross_entropy(&logits, y_b)?;
    Ok((ce_a.affine(lambda, 0.0)? + ce_b.affine(1.0 - lambda, 0.0)?)?)
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub supcon: Tensor,
    pub namix: Tensor,
}

/// `supcon(z, y_a) + namix(emb, y_a, y_b, λ)`, unweighted.
pub fn total_loss(
    z: &Tensor,
    emb: &Tensor,
    y_a: &[u32],
    y_b: &[u32],
    lambda: f64,
    contrastive: &ContrastiveConfig,
    head: &ArcFaceHead,
) -> Result<LossBreakdown> {
    let supcon = supcon_noise_loss(z, y_a, contrastive)?;
    let namix = noisy_arcmix_loss(emb, y_a, y_b, lambda, head)?;
    Ok(LossBreakdown {
        total: (&supcon + &namix)?,
        supcon,
        namix,
    })
}
