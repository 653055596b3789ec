use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, Activation, Linear, ParamStore};

/// Rows whose decoded norm falls below this are rejected rather than normalized.
pub const MIN_DECODED_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FphConfig {
    /// Bottleneck width R; `None` removes the head and the contrastive branch
    /// sees the L2-normalized raw embedding.
    pub reduction: Option<usize>,
    pub activation: Activation,
}

impl Default for FphConfig {
    fn default() -> Self {
        Self {
            reduction: Some(64),
            activation: Activation::LeakyRelu,
        }
    }
}

/// Feature Perturbation Head: `z = normalize(decoder(act(encoder(x))))` with a
/// single affine layer on each side of the bottleneck. It carries no
/// reconstruction objective; the only training signal is the contrastive loss.
pub struct FeaturePerturbationHead {
    pub encoder: Linear,
    pub decoder: Linear,
    pub activation: Activation,
}

impl FeaturePerturbationHead {
    pub fn new(ps: &mut ParamStore, prefix: &str, embedding_dim: usize, reduction: usize, activation: Activation) -> Result<Self> {
        if reduction == 0 || reduction > embedding_dim {
            return Err(Error::invalid(format!(
                "FPH reduction must be in [1, {embedding_dim}], got {reduction}"
            )));
        }
        Ok(Self {
            encoder: Linear::new(ps, &format!("{prefix}.encoder"), embedding_dim, reduction)?,
            decoder: Linear::new(ps, &format!("{prefix}.decoder"), reduction, embedding_dim)?,
            activation,
        })
    }

    /// `B × E → B × E` with unit-norm rows.
    pub fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&self.encoder.forward(emb)?)?;
        let decoded = self.decoder.forward(&h)?;
        check_row_norms(&decoded)?;
        l2_normalize(&decoded)
    }
}

pub(crate) fn check_row_norms(x: &Tensor) -> Result<()> {
    let norms = x
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    match norms.iter().position(|n| !(*n > MIN_DECODED_NORM)) {
        Some(row) => Err(Error::DegenerateEmbedding { row }),
        None => Ok(()),
    }
}
