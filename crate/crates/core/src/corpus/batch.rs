use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ClipLoader, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::features::{LogMel, StftConfig};

/// A training batch. `waveforms` is only materialized when a learnable
/// time-domain front-end needs it.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B × L`
    pub waveforms: Option<Tensor>,
    /// `B × M × N`
    pub logmels: Tensor,
    pub labels: Vec<u32>,
    /// Indices into `manifest.clips`.
    pub clip_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct CachedClip {
    waveform: Option<Vec<f32>>,
    logmel: Vec<f32>,
}

/// Source of decoded clips and their log-Mel spectrograms for one manifest.
/// With `preload`, every train clip is decoded once up front.
pub struct ClipStore {
    manifest: DatasetManifest,
    loader: ClipLoader,
    logmel: LogMel,
    keep_waveforms: bool,
    cache: Option<Vec<Option<CachedClip>>>,
    device: Device,
}

impl ClipStore {
    pub fn new(
        manifest: DatasetManifest,
        stft: &StftConfig,
        keep_waveforms: bool,
        preload: bool,
    ) -> Result<Self> {
        let loader = ClipLoader::new(stft.sample_rate, stft.clip_samples);
        let mut store = Self {
            manifest,
            loader,
            logmel: LogMel::new(stft)?,
            keep_waveforms,
            cache: None,
            device: Device::Cpu,
        };
        if preload {
            let train = store.manifest.train_indices();
            let loaded: Vec<(usize, CachedClip)> = train
                .par_iter()
                .map(|&i| store.decode(i).map(|c| (i, c)))
                .collect::<Result<_>>()?;
            let mut cache: Vec<Option<CachedClip>> =
                (0..store.manifest.clips.len()).map(|_| None).collect();
            for (i, c) in loaded {
                cache[i] = Some(c);
            }
            store.cache = Some(cache);
        }
        Ok(store)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn stft(&self) -> &StftConfig {
        self.logmel.config()
    }

    pub fn keeps_waveforms(&self) -> bool {
        self.keep_waveforms
    }

    fn decode(&self, index: usize) -> Result<CachedClip> {
        let meta = &self.manifest.clips[index];
        let samples = self.loader.load_samples(&meta.path)?;
        let logmel = self.logmel.compute(&samples)?;
        Ok(CachedClip {
            waveform: self.keep_waveforms.then_some(samples),
            logmel: logmel.into_raw_vec_and_offset().0,
        })
    }

    fn with_clip<T>(&self, index: usize, f: impl FnOnce(&CachedClip) -> T) -> Result<T> {
        if let Some(Some(c)) = self.cache.as_ref().map(|c| &c[index]) {
            return Ok(f(c));
        }
        Ok(f(&self.decode(index)?))
    }

    /// Assembles the given clips, in order, into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let stft = self.stft();
        let (m, n, l) = (stft.n_mels, stft.n_frames(), stft.clip_samples);
        let labels = indices
            .iter()
            .map(|&i| self.manifest.class_index(&self.manifest.clips[i]).map(|c| c as u32))
            .collect::<Result<Vec<_>>>()?;

        // parallel decode; collect preserves order
        let parts: Vec<(Option<Vec<f32>>, Vec<f32>)> = indices
            .par_iter()
            .map(|&i| self.with_clip(i, |c| (c.waveform.clone(), c.logmel.clone())))
            .collect::<Result<_>>()?;

        let b = indices.len();
        let mut mel = Vec::with_capacity(b * m * n);
        let mut wave = self.keep_waveforms.then(|| Vec::with_capacity(b * l));
        for (w, lm) in parts {
            mel.extend_from_slice(&lm);
            if let (Some(buf), Some(w)) = (wave.as_mut(), w) {
                buf.extend_from_slice(&w);
            }
        }
        Ok(Batch {
            waveforms: wave
                .map(|w| Tensor::from_vec(w, (b, l), &self.device))
                .transpose()?,
            logmels: Tensor::from_vec(mel, (b, m, n), &self.device)?,
            labels,
            clip_indices: indices.to_vec(),
        })
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Train-clip indices for one epoch, shuffled as a function of `(seed, epoch)`
/// and chunked into batches; only the last batch may be short.
pub fn epoch_order(
    manifest: &DatasetManifest,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut idx: Vec<usize> = manifest
        .clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::invalid("manifest has no training clips"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub struct BatchStream<'a> {
    store: &'a ClipStore,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.order.next().map(|idx| self.store.batch(&idx))
    }
}

pub fn make_batches(
    store: &ClipStore,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchStream<'_>> {
    let order = epoch_order(store.manifest(), batch_size, seed, epoch)?;
    Ok(BatchStream {
        store,
        order: order.into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use super::*;
    use crate::corpus::{ClassMap, ClipMetadata, Label, MachineKey};

    fn manifest(n_train: usize, n_test: usize) -> DatasetManifest {
        let mut clips = Vec::new();
        for i in 0..n_train + n_test {
            let split = if i < n_train { Split::Train } else { Split::Test };
            clips.push(ClipMetadata {
                machine_type: "fan".into(),
                machine_id: (i % 3) as u32,
                label: if split == Split::Test && i % 2 == 0 { Label::Anomaly } else { Label::Normal },
                split,
                path: PathBuf::from(format!("{i}.wav")),
            });
        }
        let class_map = ClassMap::from_keys((0..3).map(|i| MachineKey::new("fan", i)));
        DatasetManifest {
            root: PathBuf::new(),
            clips,
            class_map,
        }
    }

    #[test]
    fn batch_sizes_cover_epoch() {
        let m = manifest(130, 20);
        let order = epoch_order(&m, 64, 1, 0).unwrap();
        let sizes: Vec<usize> = order.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        let mut all: Vec<usize> = order.concat();
        all.sort();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }

    #[test]
    fn order_is_a_function_of_seed_and_epoch() {
        let m = manifest(50, 0);
        assert_eq!(epoch_order(&m, 8, 3, 2).unwrap(), epoch_order(&m, 8, 3, 2).unwrap());
        assert_ne!(epoch_order(&m, 8, 3, 2).unwrap(), epoch_order(&m, 8, 4, 2).unwrap());
        assert_ne!(epoch_order(&m, 8, 3, 2).unwrap(), epoch_order(&m, 8, 3, 3).unwrap());
    }

    #[test]
    fn never_yields_test_clips() {
        let m = manifest(30, 30);
        for epoch in 0..5 {
            for b in epoch_order(&m, 4, 9, epoch).unwrap() {
                assert!(b.iter().all(|&i| m.clips[i].split == Split::Train));
                assert!(b.iter().all(|&i| m.clips[i].label == Label::Normal));
            }
        }
    }

    #[test]
    fn rejects_tiny_batches_and_empty_train() {
        assert!(epoch_order(&manifest(10, 0), 1, 0, 0).is_err());
        assert!(epoch_order(&manifest(0, 4), 4, 0, 0).is_err());
    }
}
