use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adaptive_max_pool1d, max_pool1d, BatchNorm, Conv1d, Conv1dSpec, ParamStore};

/// Layer sizes of the TFgram network. [`TfgramConfig::for_stft`] gives the
/// full-size network: stem conv C=64 K=11 S=5 P=5, blocks of 64, 64 and 128
/// channels, max pool 4, adaptive max pools to 626 and 313.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfgramConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_padding: usize,
    pub block_channels: usize,
    pub out_channels: usize,
    pub pool_kernel: usize,
    pub mid_frames: usize,
    pub out_frames: usize,
}

impl TfgramConfig {
    pub fn for_stft(stft: &super::StftConfig) -> Self {
        let frames = stft.n_frames();
        Self {
            stem_channels: 64,
            stem_kernel: 11,
            stem_stride: 5,
            stem_padding: 5,
            block_channels: 64,
            out_channels: stft.n_mels,
            pool_kernel: 4,
            mid_frames: 2 * frames,
            out_frames: frames,
        }
    }
}

/// Two (conv → batch-norm → ReLU) layers, kernel 3: the first with padding 1,
/// the second with padding 2 and dilation 2. No residual path.
struct ConvBlock {
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
}

impl ConvBlock {
    fn new(ps: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut s1 = Conv1dSpec::new(c_in, c_out, 3).padding(1);
        s1.bias = false;
        let mut s2 = Conv1dSpec::new(c_out, c_out, 3).padding(2).dilation(2);
        s2.bias = false;
        Ok(Self {
            conv1: Conv1d::new(ps, &format!("{prefix}.conv1"), s1)?,
            bn1: BatchNorm::new(ps, &format!("{prefix}.bn1"), c_out)?,
            conv2: Conv1d::new(ps, &format!("{prefix}.conv2"), s2)?,
            bn2: BatchNorm::new(ps, &format!("{prefix}.bn2"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward_relu(&self.conv1.forward(x)?, train)?;
        self.bn2.forward_relu(&self.conv2.forward(&x)?, train)
    }
}

/// Time lengths after each resampling stage of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TfgramLengths {
    pub stem: usize,
    pub max_pool: usize,
    pub mid_pool: usize,
    pub out_pool: usize,
}

pub struct TfgramNet {
    cfg: TfgramConfig,
    stem: Conv1d,
    stem_bn: BatchNorm,
    block1: ConvBlock,
    block2: ConvBlock,
    block3: ConvBlock,
}

impl TfgramNet {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &TfgramConfig) -> Result<Self> {
        let mut stem = Conv1dSpec::new(1, cfg.stem_channels, cfg.stem_kernel)
            .stride(cfg.stem_stride)
            .padding(cfg.stem_padding);
        stem.bias = false;
        Ok(Self {
            cfg: cfg.clone(),
            stem: Conv1d::new(ps, &format!("{prefix}.stem"), stem)?,
            stem_bn: BatchNorm::new(ps, &format!("{prefix}.stem_bn"), cfg.stem_channels)?,
            block1: ConvBlock::new(ps, &format!("{prefix}.block1"), cfg.stem_channels, cfg.block_channels)?,
            block2: ConvBlock::new(ps, &format!("{prefix}.block2"), cfg.block_channels, cfg.block_channels)?,
            block3: ConvBlock::new(ps, &format!("{prefix}.block3"), cfg.block_channels, cfg.out_channels)?,
        })
    }

    pub fn config(&self) -> &TfgramConfig {
        &self.cfg
    }

    pub fn forward(&self, waveform: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_traced(waveform, train)?.0)
    }

    /// `B × L → B × out_channels × out_frames`, with the stage lengths.
    pub fn forward_traced(&self, waveform: &Tensor, train: bool) -> Result<(Tensor, TfgramLengths)> {
        let (_, len) = waveform.dims2()?;
        let stem_len = self.stem.spec.out_len(len).unwrap_or(0);
        let pooled = stem_len / self.cfg.pool_kernel;
        if pooled < self.cfg.mid_frames || self.cfg.mid_frames < self.cfg.out_frames {
            return Err(Error::shape(format!(
                "input of {len} samples is too short for the TFgram pooling chain \
                 ({stem_len} → {pooled} → {} → {})",
                self.cfg.mid_frames, self.cfg.out_frames
            )));
        }
        let x = self.stem.forward(&waveform.unsqueeze(1)?)?;
        let stem = x.dim(2)?;
        let x = self.stem_bn.forward_relu(&x, train)?;
        let x = self.block1.forward(&x, train)?;
        let x = max_pool1d(&x, self.cfg.pool_kernel)?;
        let max_pool = x.dim(2)?;
        let x = self.block2.forward(&x, train)?;
        let x = adaptive_max_pool1d(&x, self.cfg.mid_frames)?;
        let mid_pool = x.dim(2)?;
        let x = self.block3.forward(&x, train)?;
        let x = adaptive_max_pool1d(&x, self.cfg.out_frames)?;
        let out_pool = x.dim(2)?;
        Ok((
            x,
            TfgramLengths {
                stem,
                max_pool,
                mid_pool,
                out_pool,
            },
        ))
    }
}
