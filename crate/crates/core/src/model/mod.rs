//! The embedding model: learnable feature front ends, backbone, Feature
//! Perturbation Head and ArcFace classifier.

mod arcface;
mod backbone;
mod fph;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{stack_features, FeatureMode, FeatureStack, StftConfig, TfgramConfig, TfgramNet, TgramConfig, TgramNet};
use crate::nn::{l2_normalize, Activation, ParamStore};

pub use arcface::{arcface_logits, ArcFaceConfig, ArcFaceHead};
pub use backbone::{Backbone, BackboneConfig, BackboneVariant, MobileFaceNet, ToyBackbone};
pub use fph::{FeaturePerturbationHead, FphConfig, MIN_DECODED_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_mode: FeatureMode,
    pub stft: StftConfig,
    pub backbone: BackboneConfig,
    pub fph: FphConfig,
    pub arcface: ArcFaceConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Log-Mel input, MobileFaceNet, R = 64 leaky-ReLU head, m = 0.7.
    pub fn paper_logmel(num_classes: usize) -> Self {
        Self {
            feature_mode: FeatureMode::Logmel,
            stft: StftConfig::default(),
            backbone: BackboneConfig::default(),
            fph: FphConfig {
                reduction: Some(64),
                activation: Activation::LeakyRelu,
            },
            arcface: ArcFaceConfig {
                scale: 30.0,
                margin: 0.7,
            },
            num_classes,
        }
    }

    /// Log-Mel + Tgram + TFgram input, R = 64 ReLU head, m = 0.4.
    pub fn paper_tfst(num_classes: usize) -> Self {
        Self {
            feature_mode: FeatureMode::Tfst,
            fph: FphConfig {
                reduction: Some(64),
                activation: Activation::Relu,
            },
            arcface: ArcFaceConfig {
                scale: 30.0,
                margin: 0.4,
            },
            ..Self::paper_logmel(num_classes)
        }
    }
}

pub struct OsSclModel {
    cfg: ModelConfig,
    store: ParamStore,
    tgram: Option<TgramNet>,
    tfgram: Option<TfgramNet>,
    backbone: Backbone,
    fph: Option<FeaturePerturbationHead>,
    head: ArcFaceHead,
}

impl OsSclModel {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.stft.validate()?;
        if cfg.num_classes == 0 {
            return Err(Error::invalid("model needs at least one class"));
        }
        let mut ps = ParamStore::new(seed, dtype, device);
        let (tgram, tfgram) = match cfg.feature_mode {
            FeatureMode::Logmel => (None, None),
            FeatureMode::Tfst => (
                Some(TgramNet::new(&mut ps, "tgram", &TgramConfig::for_stft(&cfg.stft))?),
                Some(TfgramNet::new(&mut ps, "tfgram", &TfgramConfig::for_stft(&cfg.stft))?),
            ),
        };
        let hw = (cfg.stft.n_mels, cfg.stft.n_frames());
        let backbone = Backbone::new(&mut ps, &cfg.backbone, cfg.feature_mode.channels(), hw)?;
        let emb = cfg.backbone.embedding_dim;
        let fph = cfg
            .fph
            .reduction
            .map(|r| FeaturePerturbationHead::new(&mut ps, "fph", emb, r, cfg.fph.activation))
            .transpose()?;
        let head = ArcFaceHead::new(&mut ps, "arcface", cfg.num_classes, emb, &cfg.arcface)?;
        Ok(Self {
            cfg: cfg.clone(),
            store: ps,
            tgram,
            tfgram,
            backbone,
            fph,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn head(&self) -> &ArcFaceHead {
        &self.head
    }

    pub fn fph(&self) -> Option<&FeaturePerturbationHead> {
        self.fph.as_ref()
    }

    pub fn tgram(&self) -> Option<&TgramNet> {
        self.tgram.as_ref()
    }

    pub fn tfgram(&self) -> Option<&TfgramNet> {
        self.tfgram.as_ref()
    }

    /// Exact trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Builds the backbone input from (possibly mixed) log-Mels and waveforms.
    pub fn features(&self, logmels: &Tensor, waveforms: Option<&Tensor>, train: bool) -> Result<FeatureStack> {
        let logmels = logmels.to_dtype(self.store.dtype())?;
        match self.cfg.feature_mode {
            FeatureMode::Logmel => stack_features(&logmels, None, None, FeatureMode::Logmel),
            FeatureMode::Tfst => {
                let w = waveforms
                    .ok_or_else(|| Error::invalid("tfst features need the raw waveforms"))?
                    .to_dtype(self.store.dtype())?;
                let (tgram, tfgram) = (self.tgram.as_ref().unwrap(), self.tfgram.as_ref().unwrap());
                let x_t = tgram.forward(&w)?;
                let x_tf = tfgram.forward(&w, train)?;
                stack_features(&logmels, Some(&x_t), Some(&x_tf), FeatureMode::Tfst)
            }
        }
    }

    /// `B × C × M × N → B × E`
    pub fn embed(&self, stack: &FeatureStack, train: bool) -> Result<Tensor> {
        let expected = self.cfg.feature_mode.channels();
        if stack.channels() != expected || stack.data.dim(1)? != expected {
            return Err(Error::shape(format!(
                "backbone expects {expected} input channels, got {}",
                stack.data.dim(1)?
            )));
        }
        let (_, _, m, n) = stack.data.dims4()?;
        if (m, n) != (self.cfg.stft.n_mels, self.cfg.stft.n_frames()) {
            return Err(Error::shape(format!(
                "feature map {m}×{n}, expected {}×{}",
                self.cfg.stft.n_mels,
                self.cfg.stft.n_frames()
            )));
        }
        self.backbone.forward(&stack.data, train)
    }

    /// Contrastive-branch view of the embedding: the FPH output, or the
    /// normalized embedding itself when the head is disabled.
    pub fn perturb(&self, emb: &Tensor) -> Result<Tensor> {
        match &self.fph {
            Some(h) => h.forward(emb),
            None => {
                fph::check_row_norms(emb)?;
                l2_normalize(emb)
            }
        }
    }

    /// Margin-free scaled logits for scoring.
    pub fn logits(&self, emb: &Tensor) -> Result<Tensor> {
        self.head.logits(emb, None)
    }
}
