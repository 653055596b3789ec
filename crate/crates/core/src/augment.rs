//! Mixup over a batch: the waveform and log-Mel tensors of the same clips are
//! mixed with one shared coefficient and one shared permutation.

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::corpus::Batch;
use crate::error::{Error, Result};

pub const MIXUP_ALPHA: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct MixedBatch {
    /// `B × L`, present when the source batch carried waveforms.
    pub waveforms: Option<Tensor>,
    /// `B × M × N`
    pub logmels: Tensor,
    pub y_a: Vec<u32>,
    /// `y_b[i] = y_a[perm[i]]`
    pub y_b: Vec<u32>,
    pub lambda: f64,
    pub perm: Vec<usize>,
}

/// One draw from Beta(0.5, 0.5), not symmetrized.
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Beta::new(MIXUP_ALPHA, MIXUP_ALPHA).unwrap().sample(rng)
}

pub fn sample_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

fn mix(x: &Tensor, perm_idx: &Tensor, lambda: f64) -> Result<Tensor> {
    let shuffled = x.index_select(perm_idx, 0)?;
    Ok((x.affine(lambda, 0.0)? + shuffled.affine(1.0 - lambda, 0.0)?)?)
}

/// `mixed[i] = λ·x[i] + (1−λ)·x[perm[i]]` for every tensor in the batch.
pub fn mixup_batch(batch: &Batch, lambda: f64, perm: &[usize]) -> Result<MixedBatch> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::invalid(format!("mixup needs at least 2 samples, got {b}")));
    }
    if perm.len() != b {
        return Err(Error::invalid(format!("permutation of length {} for batch of {b}", perm.len())));
    }
    let mut seen = vec![false; b];
    for &p in perm {
        if p >= b || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{b}")));
        }
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }

    let idx = Tensor::from_vec(
        perm.iter().map(|&p| p as u32).collect::<Vec<_>>(),
        b,
        batch.logmels.device(),
    )?;
    Ok(MixedBatch {
        waveforms: batch
            .waveforms
            .as_ref()
            .map(|w| mix(w, &idx, lambda))
            .transpose()?,
        logmels: mix(&batch.logmels, &idx, lambda)?,
        y_a: batch.labels.clone(),
        y_b: perm.iter().map(|&p| batch.labels[p]).collect(),
        lambda,
        perm: perm.to_vec(),
    })
}
