use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, ChannelLayerNorm, Conv1d, Conv1dSpec, ParamStore, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TgramConfig {
    pub channels: usize,
    pub win_len: usize,
    pub hop: usize,
    pub n_layers: usize,
    pub out_frames: usize,
}

impl TgramConfig {
    pub fn for_stft(stft: &super::StftConfig) -> Self {
        Self {
            channels: stft.n_mels,
            win_len: stft.n_fft,
            hop: stft.hop,
            n_layers: 3,
            out_frames: stft.n_frames(),
        }
    }
}

struct EncoderLayer {
    norm: ChannelLayerNorm,
    conv: Conv1d,
}

/// Learnable time-domain front end: a strided bias-free conv with the STFT's
/// window and hop, then layers of (channel layer-norm, leaky ReLU, 3-tap conv).
/// Encoder conv biases start at zero, so silence maps to zeros at initialization.
pub struct TgramNet {
    cfg: TgramConfig,
    extractor: Conv1d,
    layers: Vec<EncoderLayer>,
}

impl TgramNet {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &TgramConfig) -> Result<Self> {
        let mut spec = Conv1dSpec::new(1, cfg.channels, cfg.win_len)
            .stride(cfg.hop)
            .padding(cfg.win_len / 2);
        spec.bias = false;
        let extractor = Conv1d::new(ps, &format!("{prefix}.extractor"), spec)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("{prefix}.encoder.{i}");
            let norm = ChannelLayerNorm::new(ps, &format!("{p}.norm"), cfg.channels)?;
            let spec = Conv1dSpec::new(cfg.channels, cfg.channels, 3).padding(1);
            let conv = Conv1d::new(ps, &format!("{p}.conv"), spec)?;
            if let Some(b) = &conv.bias {
                b.set(&b.zeros_like()?)?;
            }
            layers.push(EncoderLayer { norm, conv });
        }
        Ok(Self {
            cfg: cfg.clone(),
            extractor,
            layers,
        })
    }

    pub fn config(&self) -> &TgramConfig {
        &self.cfg
    }

    pub fn extractor_weight(&self) -> &candle_core::Var {
        &self.extractor.weight
    }

    /// `B × L → B × channels × frames`
    pub fn forward(&self, waveform: &Tensor) -> Result<Tensor> {
        let (_, len) = waveform.dims2()?;
        let frames = self.extractor.spec.out_len(len).unwrap_or(0);
        if frames != self.cfg.out_frames {
            return Err(Error::shape(format!(
                "Tgram over {len} samples gives {frames} frames, expected {}",
                self.cfg.out_frames
            )));
        }
        let mut x = self.extractor.forward(&waveform.unsqueeze(1)?)?;
        for layer in &self.layers {
            x = layer.norm.forward(&x)?;
            x = leaky_relu(&x, LEAKY_SLOPE)?;
            x = layer.conv.forward(&x)?;
        }
        Ok(x)
    }
}
