use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::ClipMetadata;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// 10 s at 16 kHz.
pub const CLIP_SAMPLES: usize = 160_000;

#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub meta: ClipMetadata,
}

/// Reads a mono PCM WAV into samples scaled to [-1, 1]. Returns (samples, sample rate).
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let wav_err = |reason: String| Error::Wav {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(format!("expected mono audio, found {} channels", spec.channels)));
    }
    let samples = match spec.sample_format {
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<Vec<_>, _>>()
        }
        SampleFormat::Float => reader.into_samples::<f32>().collect(),
    }
    .map_err(|e| wav_err(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Writes 16-bit mono PCM; samples are clamped to [-1, 1) before quantization.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Loads clips at a fixed sample rate and pads/trims them to a fixed length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipLoader {
    pub sample_rate: u32,
    pub clip_samples: usize,
}

impl Default for ClipLoader {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            clip_samples: CLIP_SAMPLES,
        }
    }
}

impl ClipLoader {
    pub fn new(sample_rate: u32, clip_samples: usize) -> Self {
        Self {
            sample_rate,
            clip_samples,
        }
    }

    pub fn load(&self, meta: &ClipMetadata) -> Result<AudioClip> {
        let samples = self.load_samples(&meta.path)?;
        Ok(AudioClip {
            samples,
            sample_rate: self.sample_rate,
            meta: meta.clone(),
        })
    }

    /// Trailing zero-pad or truncation to exactly `clip_samples`. No resampling.
    pub fn load_samples(&self, path: &Path) -> Result<Vec<f32>> {
        let (mut samples, rate) = read_wav(path)?;
        if rate != self.sample_rate {
            return Err(Error::Wav {
                path: path.to_path_buf(),
                reason: format!("sample rate {rate} Hz, expected {} Hz", self.sample_rate),
            });
        }
        samples.resize(self.clip_samples, 0.0);
        Ok(samples)
    }
}

pub fn load_clip(meta: &ClipMetadata) -> Result<AudioClip> {
    ClipLoader::default().load(meta)
}
