//! One-stage training: mixup, features, embedding, perturbation head, the
//! combined loss, AdamW with a per-epoch cosine schedule, and EMA smoothing.

mod ema;
mod schedule;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mixup_batch, sample_lambda, sample_permutation};
use crate::checkpoint::Checkpoint;
use crate::corpus::{make_batches, ClipStore, DatasetManifest};
use crate::error::{Error, Result};
use crate::losses::{total_loss, ContrastiveConfig};
use crate::model::{ModelConfig, OsSclModel};

pub use ema::{ema_update, EmaState};
pub use schedule::cosine_lr;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub eta_min: f64,
    /// `None` defers to the caller (the CLI falls back to `OSSCL_SEED`).
    pub seed: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decode every train clip once before the first epoch.
    pub preload: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            lr0: 1e-4,
            weight_decay: 1e-4,
            ema_decay: 0.999,
            eta_min: 0.0,
            seed: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            preload: true,
        }
    }
}

impl TrainConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || self.eta_min < 0.0 || self.eta_min > self.lr0 {
            return Err(Error::Config(format!("bad learning rates lr0 = {}, eta_min = {}", self.lr0, self.eta_min)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_supcon: f64,
    pub loss_namix: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub model: OsSclModel,
    pub ema: EmaState,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn into_checkpoint(self, contrastive: &ContrastiveConfig, train: &TrainConfig, manifest: &DatasetManifest) -> Result<Checkpoint> {
        Checkpoint::from_training(&self.model, &self.ema, contrastive, train, &manifest.class_map, self.steps, self.log.len())
    }
}

/// Model config with the class count taken from the manifest.
pub fn model_for_manifest(cfg: &ModelConfig, manifest: &DatasetManifest) -> ModelConfig {
    ModelConfig {
        num_classes: manifest.num_classes(),
        ..cfg.clone()
    }
}

/// Trains in memory, calling `on_epoch` after every epoch.
pub fn train_model(
    store: &ClipStore,
    model_cfg: &ModelConfig,
    contrastive: &ContrastiveConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = store.manifest();
    if manifest.train_indices().is_empty() {
        return Err(Error::invalid("manifest has no train clips"));
    }
    if manifest.num_classes() < 2 {
        return Err(Error::invalid(format!(
            "contrastive training needs at least 2 machine IDs, manifest has {}",
            manifest.num_classes()
        )));
    }
    if model_cfg.num_classes != manifest.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, manifest has {}",
            model_cfg.num_classes,
            manifest.num_classes()
        )));
    }
    if model_cfg.feature_mode.needs_waveform() && !store.keeps_waveforms() {
        return Err(Error::invalid("tfst training needs a clip store that keeps waveforms"));
    }

    let seed = cfg.seed();
    let model = OsSclModel::new(model_cfg, seed, DType::F32, &Device::Cpu)?;
    let mut ema = EmaState::new(model.store(), cfg.ema_decay)?;
    let mut opt = AdamW::new(
        model.store().trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
    )?;

    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.eta_min);
        opt.set_learning_rate(lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);

        let (mut n, mut sum_supcon, mut sum_namix) = (0usize, 0.0f64, 0.0f64);
        for (bi, batch) in make_batches(store, cfg.batch_size, seed, epoch)?.enumerate() {
            let batch = batch?;
            // a trailing singleton cannot be mixed or contrasted
            if batch.len() < 2 {
                continue;
            }
            let lambda = sample_lambda(&mut rng);
            let perm = sample_permutation(&mut rng, batch.len());
            let mixed = mixup_batch(&batch, lambda, &perm)?;
            let feats = model.features(&mixed.logmels, mixed.waveforms.as_ref(), true)?;
            let emb = model.embed(&feats, true)?;
            let z = model.perturb(&emb)?;
            let loss = total_loss(&z, &emb, &mixed.y_a, &mixed.y_b, lambda, contrastive, model.head())?;
            let supcon = loss.supcon.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let namix = loss.namix.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !(supcon + namix).is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: bi,
                    loss: supcon + namix,
                });
            }
            opt.backward_step(&loss.total)?;
            ema.update_from_store(model.store())?;
            steps += 1;

            let b = batch.len();
            n += b;
            sum_supcon += supcon * b as f64;
            sum_namix += namix * b as f64;
        }
        let (loss_supcon, loss_namix) = if n > 0 {
            (sum_supcon / n as f64, sum_namix / n as f64)
        } else {
            (f64::NAN, f64::NAN)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss_total: loss_supcon + loss_namix,
            loss_supcon,
            loss_namix,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record)?;
        log.push(record);
    }
    Ok(TrainOutcome { model, ema, log, steps })
}

/// Trains on the manifest's train split and writes `checkpoint.bin` and
/// `train_log.jsonl` under `out_dir`. Returns the checkpoint path.
pub fn train(
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    contrastive: &ContrastiveConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    train_with_progress(manifest, model_cfg, contrastive, cfg, out_dir, |_| {})
}

/// As [`train`], reporting each epoch record once it is logged.
pub fn train_with_progress(
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    contrastive: &ContrastiveConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let model_cfg = model_for_manifest(model_cfg, manifest);
    let store = ClipStore::new(manifest.clone(), &model_cfg.stft, model_cfg.feature_mode.needs_waveform(), cfg.preload)?;

    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let log_err = |e| Error::io(format!("writing {}", log_path.display()), e);
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(log_err)?);
    let outcome = train_model(&store, &model_cfg, contrastive, cfg, |rec| {
        serde_json::to_writer(&mut log_file, rec)?;
        writeln!(log_file).and_then(|_| log_file.flush()).map_err(log_err)?;
        progress(rec);
        Ok(())
    })?;
    drop(log_file);

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    outcome.into_checkpoint(contrastive, cfg, manifest)?.save(&ckpt_path)?;
    Ok(ckpt_path)
}
