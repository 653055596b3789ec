//! Feature views fed to the embedding backbone: the fixed log-Mel spectrogram,
//! the learnable Tgram and TFgram, and their channel stack.

mod dump;
mod logmel;
mod tfgram;
mod tgram;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dump::{read_feature_dump, write_feature_dump, FeatureDumpHeader};
pub use logmel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz, LogMel, StftConfig};
pub use tfgram::{TfgramConfig, TfgramNet};
pub use tgram::{TgramConfig, TgramNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Log-Mel only, one channel.
    Logmel,
    /// Log-Mel, Tgram and TFgram stacked as three channels.
    Tfst,
}

impl FeatureMode {
    pub fn channels(self) -> usize {
        match self {
            FeatureMode::Logmel => 1,
            FeatureMode::Tfst => 3,
        }
    }

    pub fn roles(self) -> Vec<ChannelRole> {
        match self {
            FeatureMode::Logmel => vec![ChannelRole::Logmel],
            FeatureMode::Tfst => vec![ChannelRole::Logmel, ChannelRole::Tgram, ChannelRole::Tfgram],
        }
    }

    pub fn needs_waveform(self) -> bool {
        self == FeatureMode::Tfst
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logmel" => Ok(FeatureMode::Logmel),
            "tfst" => Ok(FeatureMode::Tfst),
            _ => Err(Error::invalid(format!("unknown feature mode {s:?} (logmel|tfst)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelRole {
    Logmel,
    Tgram,
    Tfgram,
}

/// `B × C × M × N` backbone input with the role of each channel.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub data: Tensor,
    pub channel_roles: Vec<ChannelRole>,
}

impl FeatureStack {
    pub fn channels(&self) -> usize {
        self.channel_roles.len()
    }
}

/// Concatenates `B × M × N` views along a new channel axis in the order
/// `[logmel, tgram, tfgram]`. Log-Mel mode ignores the learnable views.
pub fn stack_features(
    x_mel: &Tensor,
    x_t: Option<&Tensor>,
    x_tf: Option<&Tensor>,
    mode: FeatureMode,
) -> Result<FeatureStack> {
    if x_mel.rank() != 3 {
        return Err(Error::shape(format!("log-Mel batch must be B×M×N, got {:?}", x_mel.dims())));
    }
    let data = match mode {
        FeatureMode::Logmel => x_mel.unsqueeze(1)?,
        FeatureMode::Tfst => {
            let (Some(t), Some(tf)) = (x_t, x_tf) else {
                return Err(Error::invalid("tfst stacking needs Tgram and TFgram views"));
            };
            for (name, v) in [("Tgram", t), ("TFgram", tf)] {
                if v.dims() != x_mel.dims() {
                    return Err(Error::shape(format!(
                        "{name} view {:?} does not match log-Mel {:?}",
                        v.dims(),
                        x_mel.dims()
                    )));
                }
            }
            Tensor::stack(&[x_mel, t, tf], 1)?
        }
    };
    Ok(FeatureStack {
        data,
        channel_roles: mode.roles(),
    })
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    #[test]
    fn tfst_stack_preserves_channel_order() {
        let dev = Device::Cpu;
        let mel = Tensor::randn(0f32, 1.0, (2, 128, 313), &dev).unwrap();
        let t = Tensor::ones((2, 128, 313), DType::F32, &dev).unwrap();
        let tf = Tensor::zeros((2, 128, 313), DType::F32, &dev).unwrap();
        let s = stack_features(&mel, Some(&t), Some(&tf), FeatureMode::Tfst).unwrap();
        assert_eq!(s.data.dims(), &[2, 3, 128, 313]);
        assert_eq!(s.channel_roles, FeatureMode::Tfst.roles());
        let ch0 = s.data.narrow(1, 0, 1).unwrap().squeeze(1).unwrap();
        assert_eq!(
            ch0.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            mel.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn logmel_stack_is_single_channel() {
        let mel = Tensor::zeros((1, 128, 313), DType::F32, &Device::Cpu).unwrap();
        let s = stack_features(&mel, None, None, FeatureMode::Logmel).unwrap();
        assert_eq!(s.data.dims(), &[1, 1, 128, 313]);
        assert_eq!(s.channels(), 1);
    }

    #[test]
    fn mismatched_views_are_rejected() {
        let dev = Device::Cpu;
        let mel = Tensor::zeros((1, 128, 313), DType::F32, &dev).unwrap();
        let bad = Tensor::zeros((1, 128, 312), DType::F32, &dev).unwrap();
        assert!(matches!(
            stack_features(&mel, Some(&bad), Some(&mel), FeatureMode::Tfst),
            Err(Error::Shape(_))
        ));
        assert!(stack_features(&mel, None, None, FeatureMode::Tfst).is_err());
    }
}
