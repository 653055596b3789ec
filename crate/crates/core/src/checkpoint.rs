//! Checkpoint archive.
//!
//! Layout: 8-byte magic `OSSCLCKP`, `u32` format version, `u64` header length,
//! a UTF-8 JSON header, then every tensor's data as little-endian `f32` in
//! header order. The header carries the model and training configuration, the
//! class map, and an index of `(set, name, dims, offset)` entries for the raw
//! and EMA weight sets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::ClassMap;
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::model::{ModelConfig, OsSclModel};
use crate::nn::ParamKind;
use crate::training::{EmaState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OSSCLCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSet {
    Raw,
    Ema,
}

impl FromStr for WeightSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(WeightSet::Raw),
            "ema" => Ok(WeightSet::Ema),
            _ => Err(Error::invalid(format!("weight set must be raw or ema, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    set: WeightSet,
    name: String,
    dims: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    contrastive: ContrastiveConfig,
    train: TrainConfig,
    class_map: ClassMap,
    steps: usize,
    epochs_completed: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub train: TrainConfig,
    pub class_map: ClassMap,
    pub steps: usize,
    pub epochs_completed: usize,
    /// Trainable parameters and buffers, in model order.
    pub raw: Vec<(String, Tensor)>,
    /// EMA shadows of the trainable parameters plus the raw buffers.
    pub ema: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_training(
        model: &OsSclModel,
        ema: &EmaState,
        contrastive: &ContrastiveConfig,
        train: &TrainConfig,
        class_map: &ClassMap,
        steps: usize,
        epochs_completed: usize,
    ) -> Result<Self> {
        if class_map.len() != model.config().num_classes {
            return Err(Error::Checkpoint(format!(
                "class map has {} entries, model has {} classes",
                class_map.len(),
                model.config().num_classes
            )));
        }
        let raw = model.store().snapshot()?;
        let mut shadow = ema.shadow.iter();
        let mut ema_set = Vec::with_capacity(raw.len());
        for (entry, (name, t)) in model.store().entries().iter().zip(&raw) {
            match entry.kind {
                ParamKind::Buffer => ema_set.push((name.clone(), t.clone())),
                ParamKind::Trainable => {
                    let (sname, st) = shadow
                        .next()
                        .ok_or_else(|| Error::Checkpoint("EMA state is missing parameters".into()))?;
                    if sname != name || st.dims() != t.dims() {
                        return Err(Error::Checkpoint(format!("EMA entry {sname} does not mirror {name}")));
                    }
                    ema_set.push((name.clone(), st.clone()));
                }
            }
        }
        Ok(Self {
            model: model.config().clone(),
            contrastive: contrastive.clone(),
            train: train.clone(),
            class_map: class_map.clone(),
            steps,
            epochs_completed,
            raw,
            ema: ema_set,
        })
    }

    pub fn weights(&self, which: WeightSet) -> &[(String, Tensor)] {
        match which {
            WeightSet::Raw => &self.raw,
            WeightSet::Ema => &self.ema,
        }
    }

    /// Rebuilds the model with the selected weight set.
    pub fn build_model(&self, which: WeightSet) -> Result<OsSclModel> {
        let model = OsSclModel::new(&self.model, 0, DType::F32, &Device::Cpu)?;
        model.store().load(self.weights(which))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut data: Vec<Vec<f32>> = Vec::new();
        for (set, list) in [(WeightSet::Raw, &self.raw), (WeightSet::Ema, &self.ema)] {
            for (name, t) in list {
                let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                tensors.push(TensorEntry {
                    set,
                    name: name.clone(),
                    dims: t.dims().to_vec(),
                    offset,
                });
                offset += v.len();
                data.push(v);
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            contrastive: self.contrastive.clone(),
            train: self.train.clone(),
            class_map: self.class_map.clone(),
            steps: self.steps,
            epochs_completed: self.epochs_completed,
            tensors,
        };
        let header = serde_json::to_vec(&header)?;

        let io_err = |e| Error::io(format!("writing checkpoint {}", path.display()), e);
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&header).map_err(io_err)?;
        for v in &data {
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io_err = |e| Error::io(format!("reading checkpoint {}", path.display()), e);
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(io_err)?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(io_err)?;
        let header_len = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(io_err)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.version != version {
            return Err(Error::Checkpoint("header version disagrees with file version".into()));
        }

        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io_err)?;
        if payload.len() % 4 != 0 {
            return Err(Error::Checkpoint("truncated tensor payload".into()));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let (mut raw, mut ema) = (Vec::new(), Vec::new());
        for e in &header.tensors {
            let n: usize = e.dims.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
            let t = Tensor::from_slice(slice, e.dims.as_slice(), &Device::Cpu)?;
            match e.set {
                WeightSet::Raw => raw.push((e.name.clone(), t)),
                WeightSet::Ema => ema.push((e.name.clone(), t)),
            }
        }
        Ok(Self {
            model: header.model,
            contrastive: header.contrastive,
            train: header.train,
            class_map: header.class_map,
            steps: header.steps,
            epochs_completed: header.epochs_completed,
            raw,
            ema,
        })
    }
}
