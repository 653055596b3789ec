use std::f64::consts::PI;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcFaceConfig {
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.7,
        }
    }
}

/// Keeps the derivative of `sqrt(1 − cos²)` finite at cos = ±1 without
/// visibly moving the logit (sin ≥ 1e-15); still a normal f32.
const SIN_SQ_FLOOR: f64 = 1e-30;

/// Additive angular margin classifier over L2-normalized embeddings and
/// L2-normalized class weights.
pub struct ArcFaceHead {
    pub weight: Var,
    pub scale: f64,
    pub margin: f64,
}

impl ArcFaceHead {
    pub fn new(ps: &mut ParamStore, prefix: &str, num_classes: usize, embedding_dim: usize, cfg: &ArcFaceConfig) -> Result<Self> {
        // xavier-uniform
        let bound = (6.0 / (num_classes + embedding_dim) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(format!("{prefix}.weight"), &[num_classes, embedding_dim], bound)?,
            scale: cfg.scale,
            margin: cfg.margin,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `B × C` matrix of cos θ between embeddings and class weights.
    pub fn cosine(&self, emb: &Tensor) -> Result<Tensor> {
        let e = l2_normalize(emb)?;
        let w = l2_normalize(self.weight.as_tensor())?;
        Ok(e.matmul(&w.t()?)?)
    }

    /// Scaled logits. With `margin_labels`, the logit at each row's label becomes
    /// `s·cos(θ+m)` while `cos θ > cos(π−m)` and `s·(cos θ − m·sin m)` beyond;
    /// every other logit is `s·cos θ`.
    pub fn logits(&self, emb: &Tensor, margin_labels: Option<&[u32]>) -> Result<Tensor> {
        let cos = self.cosine(emb)?;
        let Some(labels) = margin_labels else {
            return Ok(cos.affine(self.scale, 0.0)?);
        };
        let (b, c) = cos.dims2()?;
        if labels.len() != b {
            return Err(Error::invalid(format!("{} labels for {b} embeddings", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let m = self.margin;
        let mut onehot = vec![0f64; b * c];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * c + l as usize] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (b, c), cos.device())?.to_dtype(cos.dtype())?;

        let sin = (1.0 - cos.sqr()?)?.clamp(SIN_SQ_FLOOR, 1.0)?.sqrt()?;
        let shifted = (cos.affine(m.cos(), 0.0)? - sin.affine(m.sin(), 0.0)?)?;
        let fallback = cos.affine(1.0, -m * m.sin())?;
        let valid = cos.gt((PI - m).cos())?;
        let target = valid.where_cond(&shifted, &fallback)?;
        let mixed = ((&onehot * &target)? + ((1.0 - &onehot)? * &cos)?)?;
        Ok(mixed.affine(self.scale, 0.0)?)
    }
}

/// Free-function form: margin at `labels` when `apply_margin`, none otherwise.
pub fn arcface_logits(emb: &Tensor, labels: &[u32], head: &ArcFaceHead, apply_margin: bool) -> Result<Tensor> {
    head.logits(emb, apply_margin.then_some(labels))
}
