//! Deterministic synthetic machine corpus.
//!
//! Machine `k` hums at `f_k = 200·(k+1)` Hz plus its third harmonic, under white
//! noise with σ = 0.05. Anomalous clips add a 0.5 s broadband burst and a detuned
//! harmonic at `DETUNED_RATIO·f_k`, which sits between the regular partials of
//! every machine.

use std::f32::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{scan_dataset, write_wav, DatasetManifest, Label, Split, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const SYNTH_MACHINE_TYPE: &str = "synth";

pub const BASE_HZ: f32 = 200.0;
pub const NOISE_STD: f32 = 0.05;
pub const DETUNED_RATIO: f32 = 3.7;
const FUNDAMENTAL_AMP: f32 = 0.3;
const HARMONIC_AMP: f32 = 0.15;
const DETUNED_AMP: f32 = 0.12;
const BURST_STD: f32 = 0.25;
const BURST_SECONDS: f32 = 0.5;
const MAX_IDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub train_clips_per_id: usize,
    /// Split evenly between normal and anomaly (anomalies take the odd one).
    pub test_clips_per_id: usize,
    pub seed: u64,
    pub clip_samples: usize,
}

impl SynthConfig {
    /// Test clips default to 40% of the train count.
    pub fn new(n_ids: usize, clips_per_id: usize, seed: u64) -> Self {
        Self {
            n_ids,
            train_clips_per_id: clips_per_id,
            test_clips_per_id: (clips_per_id * 2 / 5).max(2),
            seed,
            clip_samples: super::CLIP_SAMPLES,
        }
    }

    pub fn fundamental_hz(machine: usize) -> f32 {
        BASE_HZ * (machine as f32 + 1.0)
    }
}

fn clip_seed(seed: u64, machine: usize, label: Label, seq: usize) -> u64 {
    // splitmix64 over the packed clip coordinates
    let mut z = seed
        ^ ((machine as u64) << 40)
        ^ ((label as u64) << 32)
        ^ (seq as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one clip. Normal and anomalous clips share the generator; the label
/// only switches the extra components on.
pub fn synth_clip(machine: usize, label: Label, seq: usize, seed: u64, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(seed, machine, label, seq));
    let f0 = SynthConfig::fundamental_hz(machine) * (1.0 + rng.random_range(-0.005..0.005));
    let a1 = FUNDAMENTAL_AMP * rng.random_range(0.9..1.1);
    let a3 = HARMONIC_AMP * rng.random_range(0.9..1.1);
    let p1 = rng.random_range(0.0..TAU);
    let p3 = rng.random_range(0.0..TAU);
    let noise = Normal::new(0.0f32, NOISE_STD).unwrap();
    let sr = SAMPLE_RATE as f32;

    let mut x: Vec<f32> = (0..len)
        .map(|n| {
            let t = n as f32 / sr;
            a1 * (TAU * f0 * t + p1).sin() + a3 * (TAU * 3.0 * f0 * t + p3).sin()
        })
        .collect();
    for v in x.iter_mut() {
        *v += noise.sample(&mut rng);
    }

    if label == Label::Anomaly {
        let pd = rng.random_range(0.0..TAU);
        let fd = DETUNED_RATIO * f0;
        for (n, v) in x.iter_mut().enumerate() {
            *v += DETUNED_AMP * (TAU * fd * n as f32 / sr + pd).sin();
        }
        let burst_len = ((BURST_SECONDS * sr) as usize).min(len);
        let start = rng.random_range(0..=len - burst_len);
        let burst = Normal::new(0.0f32, BURST_STD).unwrap();
        for v in &mut x[start..start + burst_len] {
            *v += burst.sample(&mut rng);
        }
    }
    x
}

/// Writes a synthetic corpus in the DCASE layout under `out/synth/{train,test}`
/// and returns the manifest obtained by scanning it back.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    if cfg.n_ids < 2 || cfg.n_ids > MAX_IDS {
        return Err(Error::invalid(format!(
            "n_ids must be in [2, {MAX_IDS}], got {}",
            cfg.n_ids
        )));
    }
    if cfg.train_clips_per_id == 0 {
        return Err(Error::invalid("train_clips_per_id must be positive"));
    }
    let type_dir = out.join(SYNTH_MACHINE_TYPE);
    for split in [Split::Train, Split::Test] {
        let d = type_dir.join(split.dir_name());
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }

    let n_anomaly = cfg.test_clips_per_id.div_ceil(2);
    let n_normal_test = cfg.test_clips_per_id - n_anomaly;
    let mut jobs = Vec::new();
    for k in 0..cfg.n_ids {
        // normal sequence numbers run across train then test so no clip repeats
        for seq in 0..cfg.train_clips_per_id {
            jobs.push((k, Label::Normal, Split::Train, seq));
        }
        for seq in 0..n_normal_test {
            jobs.push((k, Label::Normal, Split::Test, cfg.train_clips_per_id + seq));
        }
        for seq in 0..n_anomaly {
            jobs.push((k, Label::Anomaly, Split::Test, seq));
        }
    }

    jobs.par_iter().try_for_each(|&(k, label, split, seq)| {
        let x = synth_clip(k, label, seq, cfg.seed, cfg.clip_samples);
        let name = format!("{}_id_{:02}_{:08}.wav", label.as_str(), k, seq);
        write_wav(&type_dir.join(split.dir_name()).join(name), &x, SAMPLE_RATE)
    })?;

    scan_dataset(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_generation_is_deterministic_and_label_dependent() {
        let a = synth_clip(1, Label::Normal, 3, 7, 4000);
        let b = synth_clip(1, Label::Normal, 3, 7, 4000);
        let c = synth_clip(1, Label::Normal, 4, 7, 4000);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 4000);
    }

    #[test]
    fn rejects_too_few_ids() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(1, 4, 0);
        assert!(matches!(synth_generate(&cfg, dir.path()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        fs::write(&file, b"x").unwrap();
        let mut cfg = SynthConfig::new(2, 2, 0);
        cfg.clip_samples = 1600;
        assert!(matches!(synth_generate(&cfg, &file), Err(Error::Io { .. })));
    }
}
