use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// STFT/mel front-end parameters. Defaults turn a 10 s, 16 kHz clip into a
/// 128×313 log-Mel spectrogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub f_min: f32,
    pub f_max: f32,
    pub eps: f32,
    /// Nominal clip length; fixes the frame count every feature view must match.
    pub clip_samples: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 512,
            n_mels: 128,
            sample_rate: 16_000,
            f_min: 0.0,
            f_max: 8_000.0,
            eps: 1e-8,
            clip_samples: 160_000,
        }
    }
}

impl StftConfig {
    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames of a centered STFT over `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn n_frames(&self) -> usize {
        self.frames_for(self.clip_samples)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::invalid("n_fft >= 2, hop > 0 and n_mels > 0 are required"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        let nyquist = self.sample_rate as f32 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::invalid(format!(
                "mel range [{}, {}] must lie within [0, {nyquist}]",
                self.f_min, self.f_max
            )));
        }
        if self.clip_samples <= self.n_fft / 2 {
            return Err(Error::invalid("clip_samples too short for reflect padding"));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// HTK-scale triangular filters without area normalization, `n_mels × n_freqs`.
pub fn mel_filterbank(cfg: &StftConfig) -> Array2<f32> {
    let n_freqs = cfg.n_freqs();
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let freqs: Vec<f64> = (0..n_freqs)
        .map(|i| nyquist * i as f64 / (n_freqs - 1) as f64)
        .collect();
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min as f64), hz_to_mel(cfg.f_max as f64));
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    Array2::from_shape_fn((cfg.n_mels, n_freqs), |(m, k)| {
        let (left, center, right) = (pts[m], pts[m + 1], pts[m + 2]);
        let f = freqs[k];
        let up = (f - left) / (center - left);
        let down = (right - f) / (right - center);
        up.min(down).max(0.0) as f32
    })
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (0.5 - 0.5 * phase.cos()) as f32
        })
        .collect()
}

/// Reusable log-Mel extractor: the FFT plan, window and filterbank are built once.
#[derive(Clone)]
pub struct LogMel {
    cfg: StftConfig,
    window: Vec<f32>,
    filterbank: Array2<f32>,
    fft: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

impl LogMel {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            window: hann(cfg.n_fft),
            filterbank: mel_filterbank(cfg),
            fft,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// `n_mels × n_frames` matrix of `ln(mel power + eps)`.
    pub fn compute(&self, waveform: &[f32]) -> Result<Array2<f32>> {
        let cfg = &self.cfg;
        let pad = cfg.n_fft / 2;
        let n_frames = cfg.frames_for(waveform.len());
        if waveform.len() <= pad || n_frames != cfg.n_frames() {
            return Err(Error::shape(format!(
                "waveform of {} samples gives {} frames, expected {} (clip length {})",
                waveform.len(),
                n_frames,
                cfg.n_frames(),
                cfg.clip_samples
            )));
        }

        // reflect padding: x[-i] = x[i], x[L-1+i] = x[L-1-i]
        let len = waveform.len();
        let padded: Vec<f32> = (0..len + 2 * pad)
            .map(|j| {
                let i = j as isize - pad as isize;
                let i = if i < 0 {
                    -i
                } else if i >= len as isize {
                    2 * (len as isize - 1) - i
                } else {
                    i
                };
                waveform[i as usize]
            })
            .collect();

        let n_freqs = cfg.n_freqs();
        let mut power = Array2::<f32>::zeros((n_freqs, n_frames));
        let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let start = t * cfg.hop;
            for (k, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(padded[start + k] * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_freqs {
                power[[k, t]] = buf[k].norm_sqr();
            }
        }

        let mut mel = self.filterbank.dot(&power);
        let eps = cfg.eps;
        mel.mapv_inplace(|p| (p + eps).ln());
        Ok(mel)
    }
}

pub fn log_mel(waveform: &[f32], cfg: &StftConfig) -> Result<Array2<f32>> {
    LogMel::new(cfg)?.compute(waveform)
}
