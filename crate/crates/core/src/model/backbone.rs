use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Conv2dSpec, Linear, PRelu, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    Mobilefacenet,
    /// Three strided conv layers and a pooled linear head, for fast tests.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub embedding_dim: usize,
    /// Channel width of the first toy conv; doubled by each following layer.
    pub toy_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Mobilefacenet,
            embedding_dim: 128,
            toy_width: 8,
        }
    }
}

/// conv → BN → optional PReLU
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    act: Option<PRelu>,
}

impl ConvBn {
    fn new(ps: &mut ParamStore, prefix: &str, spec: Conv2dSpec, linear: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{prefix}.conv"), spec)?,
            bn: BatchNorm::new(ps, &format!("{prefix}.bn"), spec.c_out)?,
            act: (!linear)
                .then(|| PRelu::new(ps, &format!("{prefix}.prelu"), spec.c_out))
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, train)?;
        match &self.act {
            Some(a) => a.forward(&y),
            None => Ok(y),
        }
    }
}

fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Conv2dSpec {
    Conv2dSpec {
        c_in,
        c_out,
        kernel: (k, k),
        stride,
        padding,
        groups: 1,
        bias: false,
    }
}

fn depthwise(c: usize, kernel: (usize, usize), stride: usize, padding: usize) -> Conv2dSpec {
    Conv2dSpec {
        c_in: c,
        c_out: c,
        kernel,
        stride,
        padding,
        groups: c,
        bias: false,
    }
}

/// Inverted residual: 1×1 expand, 3×3 depthwise, linear 1×1 project.
struct Bottleneck {
    expand: ConvBn,
    dw: ConvBn,
    project: ConvBn,
    residual: bool,
}

impl Bottleneck {
    fn new(ps: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, stride: usize, t: usize) -> Result<Self> {
        let hidden = c_in * t;
        Ok(Self {
            expand: ConvBn::new(ps, &format!("{prefix}.expand"), conv(c_in, hidden, 1, 1, 0), false)?,
            dw: ConvBn::new(ps, &format!("{prefix}.dw"), depthwise(hidden, (3, 3), stride, 1), false)?,
            project: ConvBn::new(ps, &format!("{prefix}.project"), conv(hidden, c_out, 1, 1, 0), true)?,
            residual: stride == 1 && c_in == c_out,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.expand.forward(x, train)?;
        let y = self.dw.forward(&y, train)?;
        let y = self.project.forward(&y, train)?;
        if self.residual {
            Ok((y + x)?)
        } else {
            Ok(y)
        }
    }
}

/// (expansion, out channels, repeats, first stride)
const MFN_SETTING: [(usize, usize, usize, usize); 3] = [(2, 128, 2, 2), (4, 128, 2, 2), (4, 128, 2, 2)];

/// MobileFaceNet with a global depthwise conv sized to the final feature map
/// (8×20 for 128×313 inputs) and a linear embedding projection.
pub struct MobileFaceNet {
    stem: ConvBn,
    stem_dw: ConvBn,
    blocks: Vec<Bottleneck>,
    expand: ConvBn,
    gdc: ConvBn,
    embed: ConvBn,
}

impl MobileFaceNet {
    pub fn new(ps: &mut ParamStore, prefix: &str, in_channels: usize, input_hw: (usize, usize), emb: usize) -> Result<Self> {
        let stem_spec = conv(in_channels, 64, 3, 2, 1);
        let mut hw = stem_spec.out_hw(input_hw);
        let stem = ConvBn::new(ps, &format!("{prefix}.stem"), stem_spec, false)?;
        let stem_dw = ConvBn::new(ps, &format!("{prefix}.stem_dw"), depthwise(64, (3, 3), 1, 1), false)?;

        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (t, c, n, s) in MFN_SETTING {
            for r in 0..n {
                let stride = if r == 0 { s } else { 1 };
                let name = format!("{prefix}.blocks.{}", blocks.len());
                blocks.push(Bottleneck::new(ps, &name, c_in, c, stride, t)?);
                hw = depthwise(c, (3, 3), stride, 1).out_hw(hw);
                c_in = c;
            }
        }
        if hw.0 == 0 || hw.1 == 0 {
            return Err(Error::shape(format!("input {input_hw:?} too small for MobileFaceNet")));
        }
        Ok(Self {
            stem,
            stem_dw,
            blocks,
            expand: ConvBn::new(ps, &format!("{prefix}.expand"), conv(c_in, 512, 1, 1, 0), false)?,
            gdc: ConvBn::new(ps, &format!("{prefix}.gdc"), depthwise(512, hw, 1, 0), true)?,
            embed: ConvBn::new(ps, &format!("{prefix}.embed"), conv(512, emb, 1, 1, 0), true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.stem.forward(x, train)?;
        y = self.stem_dw.forward(&y, train)?;
        for b in &self.blocks {
            y = b.forward(&y, train)?;
        }
        y = self.expand.forward(&y, train)?;
        y = self.gdc.forward(&y, train)?;
        y = self.embed.forward(&y, train)?;
        Ok(y.flatten_from(1)?)
    }
}

/// A 4×4 stride-4 patch conv and two 3×3 stride-2 convs (each with BN and
/// ReLU), global mean and max pooling, linear head.
pub struct ToyBackbone {
    convs: Vec<(Conv2d, BatchNorm)>,
    head: Linear,
}

impl ToyBackbone {
    pub fn new(ps: &mut ParamStore, prefix: &str, in_channels: usize, width: usize, emb: usize) -> Result<Self> {
        let widths = [width, 2 * width, 4 * width];
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let spec = if i == 0 { conv(c_in, w, 4, 4, 0) } else { conv(c_in, w, 3, 2, 1) };
            let c = Conv2d::new(ps, &format!("{prefix}.conv{i}"), spec)?;
            let bn = BatchNorm::new(ps, &format!("{prefix}.bn{i}"), w)?;
            convs.push((c, bn));
            c_in = w;
        }
        Ok(Self {
            convs,
            head: Linear::new(ps, &format!("{prefix}.head"), 2 * c_in, emb)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for (c, bn) in &self.convs {
            y = bn.forward_relu(&c.forward(&y)?, train)?;
        }
        let flat = y.flatten_from(2)?;
        let pooled = Tensor::cat(&[flat.mean(2)?, flat.max(2)?], 1)?;
        self.head.forward(&pooled)
    }
}

pub enum Backbone {
    MobileFaceNet(MobileFaceNet),
    Toy(ToyBackbone),
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, cfg: &BackboneConfig, in_channels: usize, input_hw: (usize, usize)) -> Result<Self> {
        Ok(match cfg.variant {
            BackboneVariant::Mobilefacenet => {
                Backbone::MobileFaceNet(MobileFaceNet::new(ps, "backbone", in_channels, input_hw, cfg.embedding_dim)?)
            }
            BackboneVariant::Toy => {
                Backbone::Toy(ToyBackbone::new(ps, "backbone", in_channels, cfg.toy_width, cfg.embedding_dim)?)
            }
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Backbone::MobileFaceNet(m) => m.forward(x, train),
            Backbone::Toy(t) => t.forward(x, train),
        }
    }
}
